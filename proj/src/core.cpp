// SPDX-License-Identifier: Apache-2.0

#include "advrobust/core.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

namespace advrobust {

Image::Image(ImageShape shape, double value)
    : shape_(shape), pixels_(shape.size(), value) {
  if (!(value >= 0.0 && value <= 1.0)) {
    throw InvariantError("image pixels must lie in [0,1]");
  }
}

Image::Image(ImageShape shape, std::vector<double> pixels)
    : shape_(shape), pixels_(std::move(pixels)) {
  if (pixels_.size() != shape_.size()) {
    throw InvariantError("image pixel count does not match its shape");
  }
  for (double v : pixels_) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw InvariantError("image pixels must lie in [0,1]");
    }
  }
}

double linf_distance(const Image& a, const Image& b) {
  if (a.shape() != b.shape()) {
    throw InvariantError("image shapes differ");
  }
  double worst = 0.0;
  auto pa = a.pixels();
  auto pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    worst = std::max(worst, std::abs(pa[i] - pb[i]));
  }
  return worst;
}

std::string_view to_string(AttackNorm) { return "linf"; }

std::string_view to_string(SuccessMatch mode) {
  return mode == SuccessMatch::kPrefix ? "prefix" : "exact";
}

std::string_view to_string(UpdateRule) { return "sign"; }

AttackNorm parse_norm(std::string_view text) {
  if (text == "linf") return AttackNorm::kLinf;
  throw InvariantError("norm must be linf, got '" + std::string(text) + "'");
}

SuccessMatch parse_success_match(std::string_view text) {
  if (text == "prefix") return SuccessMatch::kPrefix;
  if (text == "exact") return SuccessMatch::kExact;
  throw InvariantError("success_match must be prefix or exact, got '" +
                       std::string(text) + "'");
}

UpdateRule parse_update_rule(std::string_view text) {
  if (text == "sign") return UpdateRule::kSign;
  throw InvariantError("update_rule must be sign, got '" + std::string(text) +
                       "'");
}

const AttackConfig& validate_config(const AttackConfig& config) {
  if (!(config.epsilon >= 0.0)) throw InvariantError("epsilon must be >= 0");
  if (!(config.epsilon <= 1.0)) throw InvariantError("epsilon must be <= 1");
  if (!(config.step_size > 0.0) || !std::isfinite(config.step_size)) {
    throw InvariantError("step_size must be > 0");
  }
  if (config.max_steps < 1) throw InvariantError("max_steps must be >= 1");
  if (config.window_radius < 0) {
    throw InvariantError("window_radius must be >= 0");
  }
  if (config.max_new_tokens < 1) {
    throw InvariantError("max_new_tokens must be >= 1");
  }
  return config;
}

void validate_prompt_spec(const PromptSpec& spec, bool require_target) {
  if (spec.repeat_count < 0) throw InvariantError("K must be >= 0");
  if (require_target && spec.target.empty()) {
    throw InvariantError("target must be non-empty");
  }
}

namespace {

std::string format_real(double value) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), end);
}

double parse_real(std::string_view text) {
  double value = 0.0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || end != text.data() + text.size()) {
    throw InvariantError("malformed real '" + std::string(text) + "'");
  }
  return value;
}

template <typename Int>
Int parse_int(std::string_view text) {
  Int value{};
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || end != text.data() + text.size()) {
    throw InvariantError("malformed integer '" + std::string(text) + "'");
  }
  return value;
}

std::string quote(std::string_view s) { return nlohmann::json(s).dump(); }

std::string unquote(std::string_view s) {
  auto j = nlohmann::json::parse(s, nullptr, false);
  if (!j.is_string()) {
    throw InvariantError("malformed quoted string '" + std::string(s) + "'");
  }
  return j.get<std::string>();
}

// Parses the tag line plus key=value lines, checking that keys appear in
// exactly the expected order.
std::map<std::string, std::string> parse_fields(
    std::string_view text, std::string_view tag,
    std::span<const std::string_view> keys) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != tag) {
    throw InvariantError("expected header '" + std::string(tag) + "'");
  }
  std::map<std::string, std::string> fields;
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InvariantError("malformed line '" + line + "'");
    }
    std::string key = line.substr(0, eq);
    if (index >= keys.size() || key != keys[index]) {
      throw InvariantError("unexpected field '" + key + "'");
    }
    fields.emplace(std::move(key), line.substr(eq + 1));
    ++index;
  }
  if (index != keys.size()) {
    throw InvariantError("missing field '" + std::string(keys[index]) + "'");
  }
  return fields;
}

constexpr std::string_view kConfigTag = "attack_config v1";
constexpr std::array<std::string_view, 10> kConfigKeys = {
    "epsilon",     "step_size", "max_steps",   "norm",       "success_match",
    "window_radius", "seed",    "update_rule", "early_stop", "max_new_tokens"};

constexpr std::string_view kSpecTag = "prompt_spec v1";
constexpr std::array<std::string_view, 6> kSpecKeys = {
    "base_prompt", "security_spec", "repeat_segment",
    "K",           "prefill",       "target"};

}  // namespace

std::string serialize(const AttackConfig& c) {
  std::ostringstream out;
  out << kConfigTag << '\n'
      << "epsilon=" << format_real(c.epsilon) << '\n'
      << "step_size=" << format_real(c.step_size) << '\n'
      << "max_steps=" << c.max_steps << '\n'
      << "norm=" << to_string(c.norm) << '\n'
      << "success_match=" << to_string(c.success_match) << '\n'
      << "window_radius=" << c.window_radius << '\n'
      << "seed=" << c.seed << '\n'
      << "update_rule=" << to_string(c.update_rule) << '\n'
      << "early_stop=" << (c.early_stop ? "true" : "false") << '\n'
      << "max_new_tokens=" << c.max_new_tokens << '\n';
  return out.str();
}

std::string serialize(const PromptSpec& s) {
  std::ostringstream out;
  out << kSpecTag << '\n'
      << "base_prompt=" << quote(s.base_prompt) << '\n'
      << "security_spec=" << quote(s.security_spec) << '\n'
      << "repeat_segment=" << quote(s.repeat_segment) << '\n'
      << "K=" << s.repeat_count << '\n'
      << "prefill=" << quote(s.prefill) << '\n'
      << "target=" << quote(s.target) << '\n';
  return out.str();
}

AttackConfig parse_attack_config(std::string_view text) {
  auto f = parse_fields(text, kConfigTag, kConfigKeys);
  AttackConfig c;
  c.epsilon = parse_real(f["epsilon"]);
  c.step_size = parse_real(f["step_size"]);
  c.max_steps = parse_int<int>(f["max_steps"]);
  c.norm = parse_norm(f["norm"]);
  c.success_match = parse_success_match(f["success_match"]);
  c.window_radius = parse_int<int>(f["window_radius"]);
  c.seed = parse_int<std::uint64_t>(f["seed"]);
  c.update_rule = parse_update_rule(f["update_rule"]);
  const std::string& stop = f["early_stop"];
  if (stop != "true" && stop != "false") {
    throw InvariantError("early_stop must be true or false");
  }
  c.early_stop = stop == "true";
  c.max_new_tokens = parse_int<int>(f["max_new_tokens"]);
  return c;
}

PromptSpec parse_prompt_spec(std::string_view text) {
  auto f = parse_fields(text, kSpecTag, kSpecKeys);
  PromptSpec s;
  s.base_prompt = unquote(f["base_prompt"]);
  s.security_spec = unquote(f["security_spec"]);
  s.repeat_segment = unquote(f["repeat_segment"]);
  s.repeat_count = parse_int<int>(f["K"]);
  s.prefill = unquote(f["prefill"]);
  s.target = unquote(f["target"]);
  return s;
}

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(),
                 nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

std::string config_hash(const AttackConfig& config, const PromptSpec& spec) {
  return sha256_hex(serialize(config) + serialize(spec));
}

std::uint64_t derive_seed(std::string_view material) {
  std::string hex = sha256_hex(material);
  return std::stoull(hex.substr(0, 16), nullptr, 16);
}

std::optional<int> first_success_step(std::span<const TraceRecord> records) {
  for (const auto& r : records) {
    if (r.success) return r.step;
  }
  return std::nullopt;
}

void validate_trace(const AttackTrace& trace, double epsilon) {
  for (std::size_t i = 0; i < trace.records.size(); ++i) {
    const auto& r = trace.records[i];
    if (r.step != static_cast<int>(i) + 1) {
      throw InvariantError("trace steps must run 1..n without gaps");
    }
    if (!(r.loss >= 0.0)) throw InvariantError("trace loss must be >= 0");
    if (!(r.linf_dev <= epsilon + 1e-9)) {
      throw InvariantError("trace linf_dev exceeds epsilon");
    }
  }
  if (first_success_step(trace.records) != trace.success_step) {
    throw InvariantError("success_step disagrees with the records");
  }
}

}  // namespace advrobust
