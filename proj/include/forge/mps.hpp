#pragma once

#include <map>
#include <string>
#include <vector>

#include "forge/search.hpp"

FORGE_NAMESPACE_BEGIN
namespace mps {

enum class Role { Weight, Activation };

struct PrecisionChoice {
  std::string owner;             // "<node>.weight" or "<node>.act"
  Role role = Role::Weight;
  std::vector<int> bits;         // candidate bitwidths
  Tensor theta;                  // [|bits|] logits
  Tensor alpha;                  // PACT clip, activations only
  std::vector<std::string> members;  // nodes whose output shares this quantizer
};

/// sum_p softmax(theta)_p * Q_p(t); min-max quantizers for weights, PACT for
/// activations. `min_bits` raises every candidate to at least that width
/// (used for biases). In discrete mode only the finalized precision is used.
[[nodiscard]] Tensor effective_tensor(const Tensor& t, const PrecisionChoice& choice, bool discrete = false,
                                      int min_bits = 0);

/// sum_p softmax(theta)_p * max(p, min_bits).
[[nodiscard]] Tensor effective_bitwidth(const PrecisionChoice& choice, int min_bits = 0);

/// Argmax bitwidth; the larger bitwidth wins ties.
[[nodiscard]] int finalize(const PrecisionChoice& choice);

/// Biases never go below this width.
inline constexpr int kMinBiasBits = 8;

struct Options {
  std::vector<int> bits{2, 4, 8};
  std::vector<std::string> exclude;
  Real alpha_init = 8;
  /// Fold BatchNorm before attaching; attaching to an unfolded graph fails.
  bool fold = true;
};

class MpsMethod final : public SearchMethod {
 public:
  MpsMethod(const Graph& g, const Options& opt);

  [[nodiscard]] std::string name() const override { return "mps"; }
  [[nodiscard]] Tensor weight(const Node& n, const std::string& name, const Tensor& w,
                              const ExecOptions& opt) const override;
  [[nodiscard]] Tensor output(const Node& n, const Tensor& y, const ExecOptions& opt) const override;
  [[nodiscard]] std::vector<Tensor> arch_parameters() const override;
  [[nodiscard]] std::vector<Tensor> extra_weight_parameters() const override;
  [[nodiscard]] Tensor get_cost(const Graph& g, const cost::CostSpec& spec) const override;
  [[nodiscard]] Graph export_graph(const Graph& g, nlohmann::json* report) const override;
  [[nodiscard]] ArrayMap state() const override;

  [[nodiscard]] const std::vector<PrecisionChoice>& weight_choices() const { return weights_; }
  [[nodiscard]] std::vector<PrecisionChoice>& weight_choices() { return weights_; }
  [[nodiscard]] const std::vector<PrecisionChoice>& activation_choices() const { return acts_; }
  [[nodiscard]] std::vector<PrecisionChoice>& activation_choices() { return acts_; }
  /// Choice quantizing the output of `node`, or null.
  [[nodiscard]] const PrecisionChoice* activation_of(const std::string& node) const;
  [[nodiscard]] const PrecisionChoice* weight_of(const std::string& node) const;

 private:
  std::vector<PrecisionChoice> weights_;
  std::vector<PrecisionChoice> acts_;
  std::map<std::string, std::size_t> weight_index_;
  std::map<std::string, std::size_t> act_index_;
  ShapeMap shapes_;
  std::vector<std::string> warnings_;
};

[[nodiscard]] SearchableModel make_mps(const Graph& seed, const Options& opt = {});

/// Exact storage of the weights of an exported graph: every weight and bias
/// element of a Conv/Linear node at its annotated bitwidth (32 when
/// unannotated), in bytes.
[[nodiscard]] double checkpoint_bytes(const Graph& exported, const ArrayMap& arrays);

}  // namespace mps
FORGE_NAMESPACE_END
