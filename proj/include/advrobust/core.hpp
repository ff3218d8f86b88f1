// SPDX-License-Identifier: Apache-2.0
//
// Domain types shared by every module: images, attack configuration,
// prompt specifications, attack traces and paired outcomes.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace advrobust {

/// Raised when a value violates a documented invariant.  The message names
/// the violated invariant.
class InvariantError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ImageShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// Pixel tensor laid out channel-major (c, h, w) with every value in [0,1].
class Image {
 public:
  Image() = default;
  /// Filled with `value`.
  Image(ImageShape shape, double value = 0.0);
  /// Throws InvariantError if the size disagrees with the shape or any
  /// element leaves [0,1] (NaN included).
  Image(ImageShape shape, std::vector<double> pixels);

  const ImageShape& shape() const { return shape_; }
  std::size_t size() const { return pixels_.size(); }
  std::span<const double> pixels() const { return pixels_; }

  double at(std::size_t c, std::size_t h, std::size_t w) const {
    return pixels_[(c * shape_.height + h) * shape_.width + w];
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  ImageShape shape_{};
  std::vector<double> pixels_;
};

/// Largest absolute elementwise difference.  Shapes must match.
double linf_distance(const Image& a, const Image& b);

enum class AttackNorm { kLinf };
enum class SuccessMatch { kPrefix, kExact };
/// Only the sign-gradient step is implemented; the enum leaves room for
/// raw-gradient variants.
enum class UpdateRule { kSign };

std::string_view to_string(AttackNorm norm);
std::string_view to_string(SuccessMatch mode);
std::string_view to_string(UpdateRule rule);
AttackNorm parse_norm(std::string_view text);
SuccessMatch parse_success_match(std::string_view text);
UpdateRule parse_update_rule(std::string_view text);

/// Budget and schedule of one targeted attack.  Pixel scale is [0,1], so
/// epsilon = 16/255 means sixteen grey levels.
struct AttackConfig {
  double epsilon = 16.0 / 255.0;
  double step_size = 0.1;
  int max_steps = 300;
  AttackNorm norm = AttackNorm::kLinf;
  SuccessMatch success_match = SuccessMatch::kPrefix;
  int window_radius = 10;
  std::uint64_t seed = 0;
  UpdateRule update_rule = UpdateRule::kSign;
  /// Stop at the first successful step.
  bool early_stop = true;
  /// Greedy generation budget used for the per-step success check.
  int max_new_tokens = 32;

  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

/// Returns `config` unchanged or throws InvariantError naming the first
/// violated invariant.
const AttackConfig& validate_config(const AttackConfig& config);

/// Everything needed to render the attacked prompt.  `repeat_segment` is
/// appended `repeat_count` times right after the security specification.
struct PromptSpec {
  std::string base_prompt;
  std::string security_spec;
  std::string repeat_segment;
  int repeat_count = 0;
  std::string prefill;
  std::string target;

  friend bool operator==(const PromptSpec&, const PromptSpec&) = default;
};

void validate_prompt_spec(const PromptSpec& spec, bool require_target);

// Canonical text serialization: a tag line, then one `key=value` line per
// field in declaration order.  Strings are JSON-escaped and quoted, reals
// use shortest round-trip formatting.
std::string serialize(const AttackConfig& config);
std::string serialize(const PromptSpec& spec);
AttackConfig parse_attack_config(std::string_view text);
PromptSpec parse_prompt_spec(std::string_view text);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);

/// Digest of the canonical serialization of both inputs.
std::string config_hash(const AttackConfig& config, const PromptSpec& spec);

/// First eight bytes of SHA-256 over `material`, big-endian.
std::uint64_t derive_seed(std::string_view material);

struct TraceRecord {
  int step = 0;
  double loss = 0.0;
  bool success = false;
  double linf_dev = 0.0;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct AttackTrace {
  std::vector<TraceRecord> records;
  std::string config_hash;
  std::optional<int> success_step;
  /// Target NLL at the clean image, before any update.
  double initial_loss = 0.0;
  /// Set when the run aborted (non-finite loss or gradient).
  std::optional<std::string> diagnostic;

  bool failed() const { return !success_step.has_value(); }
  friend bool operator==(const AttackTrace&, const AttackTrace&) = default;
};

/// Smallest step whose record reports success.
std::optional<int> first_success_step(std::span<const TraceRecord> records);

/// Checks the record-level invariants: steps run 1..n, losses are
/// non-negative, deviations stay within epsilon (plus 1e-9) and the stored
/// success step matches the records.
void validate_trace(const AttackTrace& trace, double epsilon);

struct PairedOutcome {
  std::string item_id;
  bool baseline_correct = false;
  bool treatment_correct = false;
};

}  // namespace advrobust
