// SPDX-License-Identifier: Apache-2.0
//
// The oracle contract every model satisfies, a closed-form toy
// vision-language model that implements it exactly, and a registry that
// builds adapters from JSON descriptions.

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "advrobust/core.hpp"
#include "advrobust/prompt.hpp"

namespace advrobust {

class AdapterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsupportedCapability : public AdapterError {
 public:
  using AdapterError::AdapterError;
};

struct AdapterCapabilities {
  bool supports_gradient = false;
  bool supports_generation = false;
  bool supports_saliency = false;

  bool can_attack() const { return supports_gradient && supports_generation; }
};

enum class Decoding { kGreedy };

/// Generation budgets for the two MCQ compute settings.
inline constexpr int kNoCotMaxTokens = 5;
inline constexpr int kCotMaxTokens = 500;

/// Unconstrained real tensor with an image's shape.
struct Gradient {
  ImageShape shape;
  std::vector<double> values;
};

struct LossAndGradient {
  double loss = 0.0;
  Gradient gradient;
};

/// Non-negative (height x width) map summing to one.
struct SaliencyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

/// A model under evaluation.  Instances need not be thread-safe; callers
/// give each worker its own instance.
class ModelAdapter {
 public:
  virtual ~ModelAdapter() = default;

  virtual std::string name() const = 0;
  virtual AdapterCapabilities capabilities() const = 0;
  virtual ChatFraming framing() const { return {}; }

  /// Teacher-forced NLL of spec.target, summed over target tokens, given
  /// the framed prompt, the image and the pre-fill; plus d(loss)/d(pixels).
  virtual LossAndGradient target_nll(const Image& image, const PromptSpec& spec);

  /// Continuation of the framed prompt and pre-fill, without the pre-fill.
  virtual std::string generate(const Image& image, const PromptSpec& spec,
                               int max_new_tokens,
                               Decoding decoding = Decoding::kGreedy);

  /// Defaults to gradient_saliency() for adapters that declare the
  /// capability but have no attention maps of their own.
  virtual SaliencyMap attention_saliency(const Image& image,
                                         const PromptSpec& spec);
};

/// Normalized absolute target-NLL gradient, summed over channels.  A zero
/// gradient yields the uniform map.
SaliencyMap gradient_saliency(ModelAdapter& adapter, const Image& image,
                              const PromptSpec& spec);

/// Affine-softmax model: logits = W x + b + C n(context), where n counts
/// vocabulary words in the context.  C is empty by default, making the
/// logits a function of the pixels alone.
struct ToyModelParams {
  std::vector<std::string> vocabulary;
  /// One row per vocabulary token, one column per pixel.
  std::vector<std::vector<double>> weight;
  std::vector<double> bias;
  /// Optional (V x V) coupling of context word counts into the logits.
  std::vector<std::vector<double>> context_weight;
  /// Token that ends greedy generation.
  std::optional<std::string> eos;

  void validate() const;
};

ToyModelParams toy_params_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ToyModelParams& params);
ToyModelParams load_toy_params(const std::filesystem::path& path);

/// Words are whitespace-separated; each word matching a vocabulary entry is
/// one token.  Unknown words in the context are ignored.  Unknown words in
/// the target are an error, since their likelihood is undefined.
class ToyModel final : public ModelAdapter {
 public:
  explicit ToyModel(ToyModelParams params);

  std::string name() const override { return "toy"; }
  AdapterCapabilities capabilities() const override {
    return {true, true, true};
  }

  LossAndGradient target_nll(const Image& image, const PromptSpec& spec) override;
  std::string generate(const Image& image, const PromptSpec& spec,
                       int max_new_tokens, Decoding decoding) override;

  const ToyModelParams& params() const { return params_; }

  std::vector<int> tokenize_context(std::string_view text) const;
  std::vector<int> tokenize_target(std::string_view text) const;
  /// Logits given the pixels and context token counts.
  std::vector<double> logits(const Image& image,
                             const std::vector<double>& context_counts) const;

 private:
  void check_image(const Image& image) const;
  std::vector<double> pixel_logits(const Image& image) const;
  std::vector<double> counts_of(const std::vector<int>& tokens) const;
  void add_context(std::vector<double>& z,
                   const std::vector<double>& counts) const;

  ToyModelParams params_;
  std::map<std::string, int, std::less<>> index_;
};

/// Generation-only adapter that always emits the same text.
class ConstantAdapter final : public ModelAdapter {
 public:
  explicit ConstantAdapter(std::string output) : output_(std::move(output)) {}

  std::string name() const override { return "constant"; }
  AdapterCapabilities capabilities() const override {
    return {false, true, false};
  }
  std::string generate(const Image&, const PromptSpec&, int max_new_tokens,
                       Decoding) override;

 private:
  std::string output_;
};

/// Key under which a generation is recorded: digest of the prompt spec,
/// the pixels and the token budget.
std::string replay_key(const Image& image, const PromptSpec& spec,
                       int max_new_tokens);

/// Generation-only adapter serving recorded responses, so pipelines that
/// rely on remote models run offline.  Unknown keys fall back to
/// `fallback` when set, otherwise raise AdapterError.
class ReplayAdapter final : public ModelAdapter {
 public:
  ReplayAdapter(std::map<std::string, std::string> responses,
                std::optional<std::string> fallback = std::nullopt)
      : responses_(std::move(responses)), fallback_(std::move(fallback)) {}

  /// JSONL lines of {"key": ..., "output": ...}.
  static ReplayAdapter load(const std::filesystem::path& path,
                            std::optional<std::string> fallback = std::nullopt);

  std::string name() const override { return "replay"; }
  AdapterCapabilities capabilities() const override {
    return {false, true, false};
  }
  std::string generate(const Image& image, const PromptSpec& spec,
                       int max_new_tokens, Decoding) override;

 private:
  std::map<std::string, std::string> responses_;
  std::optional<std::string> fallback_;
};

/// Forwards to another adapter and keeps every generation, for later
/// replay.
class RecordingAdapter final : public ModelAdapter {
 public:
  explicit RecordingAdapter(std::unique_ptr<ModelAdapter> inner)
      : inner_(std::move(inner)) {}

  std::string name() const override { return inner_->name(); }
  AdapterCapabilities capabilities() const override {
    return inner_->capabilities();
  }
  ChatFraming framing() const override { return inner_->framing(); }
  LossAndGradient target_nll(const Image& image, const PromptSpec& spec) override {
    return inner_->target_nll(image, spec);
  }
  std::string generate(const Image& image, const PromptSpec& spec,
                       int max_new_tokens, Decoding decoding) override;
  SaliencyMap attention_saliency(const Image& image,
                                 const PromptSpec& spec) override {
    return inner_->attention_saliency(image, spec);
  }

  /// Writes the recorded responses in ReplayAdapter::load format.
  void save(const std::filesystem::path& path) const;

 private:
  std::unique_ptr<ModelAdapter> inner_;
  std::map<std::string, std::string> recorded_;
};

/// Builds adapters from {"name": ..., ...} descriptions.  Relative paths
/// inside a description resolve against `base_dir`.
class AdapterRegistry {
 public:
  using Factory = std::function<std::unique_ptr<ModelAdapter>(
      const nlohmann::json& description, const std::filesystem::path& base_dir)>;

  /// Registry preloaded with "toy", "constant" and "replay".
  static AdapterRegistry with_builtins();

  void add(std::string name, Factory factory);
  bool contains(std::string_view name) const;
  std::unique_ptr<ModelAdapter> create(const nlohmann::json& description,
                                       const std::filesystem::path& base_dir) const;

 private:
  std::map<std::string, Factory, std::less<>> factories_;
};

}  // namespace advrobust
