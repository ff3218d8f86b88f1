// SPDX-License-Identifier: Apache-2.0
//
// Prompt construction: security specifications with K-fold repetition,
// teacher-forcing contexts with pre-filled responses, injected-text image
// fixtures, and multiple-choice questions with their answer parsing.

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advrobust/core.hpp"

namespace advrobust {

/// Marks where the security specification goes inside a base prompt.  A
/// base prompt without the slot receives the specification at its end.
inline constexpr std::string_view kSpecSlot = "{spec}";

/// Base prompt with the specification block (security_spec followed by K
/// copies of repeat_segment) substituted at the slot.  Throws
/// InvariantError when the slot appears more than once.
std::string render_prompt(const PromptSpec& spec);

/// Turn markers wrapped around the user prompt.  Owned by the adapter.
struct ChatFraming {
  std::string user_prefix = "USER: ";
  std::string assistant_prefix = "\nASSISTANT: ";
};

/// Context after which target tokens are scored: framed prompt followed by
/// the pre-filled response.
std::string assemble_teacher_forcing(const PromptSpec& spec,
                                     const ChatFraming& framing);

/// Binary glyph bitmap, row-major.
struct GlyphMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  bool at(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
};

/// Paints every masked pixel (all channels) with `intensity`.
Image overlay_injection(const Image& image, const GlyphMask& glyph,
                        std::size_t row, std::size_t col, double intensity);

struct MCQItem {
  std::string item_id;
  std::string image_ref;
  std::string true_label;
  std::vector<std::string> options;
  std::uint64_t seed = 0;

  friend bool operator==(const MCQItem&, const MCQItem&) = default;
};

/// Throws InvariantError unless the true label occurs exactly once and the
/// options are pairwise distinct.
void validate_mcq(const MCQItem& item);

/// N-1 distractors drawn uniformly without replacement from the pool (minus
/// the true label), with the true label at a seeded uniform position.
MCQItem build_mcq(const std::string& true_label,
                  std::span<const std::string> label_pool, int n_options,
                  std::uint64_t seed);

/// kStandard is the 30-way wording, kLargeScale the 1000-way wording.
enum class McqTemplate { kStandard, kLargeScale };

std::string_view to_string(McqTemplate t);
McqTemplate parse_mcq_template(std::string_view text);

/// "1. <label>" through "N. <label>", newline separated.
std::string render_option_list(std::span<const std::string> options);

std::string render_mcq_prompt(const MCQItem& item, bool cot,
                              McqTemplate tmpl = McqTemplate::kStandard);

struct ParsedAnswer {
  std::optional<int> index;
  std::string failure;

  bool ok() const { return index.has_value(); }
};

/// Without CoT: first integer in the output.  With CoT: first integer after
/// the final "Answer:" marker.  Indices outside [1, n_options] fail.
ParsedAnswer parse_answer(std::string_view output, bool cot, int n_options);

/// Classification prompt fed to a text-only model, listing every category.
std::string render_classification_prompt(std::string_view description,
                                         std::span<const std::string> labels);

/// Case-insensitive exact match after trimming whitespace.
std::optional<std::string> match_label(std::string_view output,
                                       std::span<const std::string> labels);

std::string_view trim(std::string_view text);

/// Uniform integers in [0, bound) drawn from mt19937_64 by rejection.
/// std::uniform_int_distribution is implementation-defined, this is not.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : engine_(seed) {}
  std::uint64_t below(std::uint64_t bound);

 private:
  std::mt19937_64 engine_;
};

namespace fixtures {

/// Security specification for the visual prompt-injection setup.
std::string_view injection_security_spec();
/// Base prompt for the injection setup, with the spec slot at its head.
std::string_view injection_base_prompt();
std::string_view injection_prefill();
std::string_view injection_target();

/// Full injection PromptSpec with or without the security specification.
PromptSpec injection_prompt_spec(bool with_security_spec);

/// The 163-category label set used by the classification prompt.
std::span<const std::string> classification_labels();

}  // namespace fixtures

}  // namespace advrobust
