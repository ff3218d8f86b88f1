// SPDX-License-Identifier: Apache-2.0

#include "advrobust/model.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace advrobust {

LossAndGradient ModelAdapter::target_nll(const Image&, const PromptSpec&) {
  throw UnsupportedCapability(name() + " does not provide gradients");
}

std::string ModelAdapter::generate(const Image&, const PromptSpec&, int,
                                   Decoding) {
  throw UnsupportedCapability(name() + " does not support generation");
}

SaliencyMap ModelAdapter::attention_saliency(const Image& image,
                                             const PromptSpec& spec) {
  if (!capabilities().supports_saliency) {
    throw UnsupportedCapability(name() + " does not provide saliency maps");
  }
  return gradient_saliency(*this, image, spec);
}

SaliencyMap gradient_saliency(ModelAdapter& adapter, const Image& image,
                              const PromptSpec& spec) {
  auto result = adapter.target_nll(image, spec);
  const auto& shape = image.shape();
  SaliencyMap map{shape.height, shape.width,
                  std::vector<double>(shape.height * shape.width, 0.0)};
  const std::size_t plane = shape.height * shape.width;
  for (std::size_t i = 0; i < result.gradient.values.size(); ++i) {
    map.values[i % plane] += std::abs(result.gradient.values[i]);
  }
  double total = 0.0;
  for (double v : map.values) total += v;
  if (total > 0.0 && std::isfinite(total)) {
    for (double& v : map.values) v /= total;
  } else {
    std::fill(map.values.begin(), map.values.end(),
              1.0 / static_cast<double>(plane));
  }
  return map;
}

// ---------------------------------------------------------------------------
// Toy model

void ToyModelParams::validate() const {
  const std::size_t v = vocabulary.size();
  if (v == 0) throw InvariantError("toy vocabulary must not be empty");
  if (weight.size() != v) {
    throw InvariantError("toy weight row count must equal vocabulary size");
  }
  const std::size_t cols = weight.front().size();
  for (const auto& row : weight) {
    if (row.size() != cols) {
      throw InvariantError("toy weight rows must share one column count");
    }
  }
  if (bias.size() != v) {
    throw InvariantError("toy bias length must equal vocabulary size");
  }
  if (!context_weight.empty()) {
    if (context_weight.size() != v) {
      throw InvariantError("toy context_weight must be V x V");
    }
    for (const auto& row : context_weight) {
      if (row.size() != v) throw InvariantError("toy context_weight must be V x V");
    }
  }
  std::vector<std::string> sorted = vocabulary;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw InvariantError("toy vocabulary entries must be distinct");
  }
  for (const auto& word : vocabulary) {
    if (word.empty() ||
        word.find_first_of(" \t\n\r\f\v") != std::string::npos) {
      throw InvariantError("toy vocabulary entries must be single words");
    }
  }
  if (eos && std::find(vocabulary.begin(), vocabulary.end(), *eos) ==
                 vocabulary.end()) {
    throw InvariantError("toy eos token must be in the vocabulary");
  }
}

ToyModelParams toy_params_from_json(const nlohmann::json& j) {
  ToyModelParams p;
  p.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  p.weight = j.at("weight").get<std::vector<std::vector<double>>>();
  p.bias = j.at("bias").get<std::vector<double>>();
  if (j.contains("context_weight")) {
    p.context_weight = j.at("context_weight").get<std::vector<std::vector<double>>>();
  }
  if (j.contains("eos") && !j.at("eos").is_null()) {
    p.eos = j.at("eos").get<std::string>();
  }
  p.validate();
  return p;
}

nlohmann::json to_json(const ToyModelParams& p) {
  nlohmann::json j;
  j["vocabulary"] = p.vocabulary;
  j["weight"] = p.weight;
  j["bias"] = p.bias;
  if (!p.context_weight.empty()) j["context_weight"] = p.context_weight;
  if (p.eos) j["eos"] = *p.eos;
  return j;
}

ToyModelParams load_toy_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw AdapterError("cannot open toy model file " + path.string());
  return toy_params_from_json(nlohmann::json::parse(in));
}

ToyModel::ToyModel(ToyModelParams params) : params_(std::move(params)) {
  params_.validate();
  for (std::size_t i = 0; i < params_.vocabulary.size(); ++i) {
    index_.emplace(params_.vocabulary[i], static_cast<int>(i));
  }
}

namespace {

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  auto is_space = [](char ch) {
    return ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' ||
           ch == '\v';
  };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.push_back(text.substr(start, i - start));
  }
  return words;
}

// log(sum(exp(z))) and softmax(z), computed stably.
double log_softmax_into(const std::vector<double>& z, std::vector<double>& probs) {
  const double peak = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  probs.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    probs[i] = std::exp(z[i] - peak);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
  return peak + std::log(sum);
}

}  // namespace

std::vector<int> ToyModel::tokenize_context(std::string_view text) const {
  std::vector<int> tokens;
  for (auto word : split_words(text)) {
    auto it = index_.find(word);
    if (it != index_.end()) tokens.push_back(it->second);
  }
  return tokens;
}

std::vector<int> ToyModel::tokenize_target(std::string_view text) const {
  std::vector<int> tokens;
  for (auto word : split_words(text)) {
    auto it = index_.find(word);
    if (it == index_.end()) {
      throw AdapterError("target word '" + std::string(word) +
                         "' is not in the toy vocabulary");
    }
    tokens.push_back(it->second);
  }
  if (tokens.empty()) throw AdapterError("target is empty after tokenization");
  return tokens;
}

void ToyModel::check_image(const Image& image) const {
  if (image.size() != params_.weight.front().size()) {
    throw AdapterError("image has " + std::to_string(image.size()) +
                       " pixels, toy model expects " +
                       std::to_string(params_.weight.front().size()));
  }
}

std::vector<double> ToyModel::pixel_logits(const Image& image) const {
  check_image(image);
  auto x = image.pixels();
  std::vector<double> z(params_.vocabulary.size());
  for (std::size_t v = 0; v < z.size(); ++v) {
    double acc = params_.bias[v];
    const auto& row = params_.weight[v];
    for (std::size_t i = 0; i < x.size(); ++i) acc += row[i] * x[i];
    z[v] = acc;
  }
  return z;
}

std::vector<double> ToyModel::counts_of(const std::vector<int>& tokens) const {
  std::vector<double> counts(params_.vocabulary.size(), 0.0);
  for (int t : tokens) counts[static_cast<std::size_t>(t)] += 1.0;
  return counts;
}

void ToyModel::add_context(std::vector<double>& z,
                           const std::vector<double>& counts) const {
  if (params_.context_weight.empty()) return;
  for (std::size_t v = 0; v < z.size(); ++v) {
    const auto& row = params_.context_weight[v];
    for (std::size_t u = 0; u < counts.size(); ++u) z[v] += row[u] * counts[u];
  }
}

std::vector<double> ToyModel::logits(const Image& image,
                                     const std::vector<double>& context_counts) const {
  auto z = pixel_logits(image);
  add_context(z, context_counts);
  return z;
}

LossAndGradient ToyModel::target_nll(const Image& image, const PromptSpec& spec) {
  const auto target = tokenize_target(spec.target);
  auto counts = counts_of(tokenize_context(assemble_teacher_forcing(spec, framing())));
  const auto base = pixel_logits(image);
  const std::size_t vocab = base.size();

  // d(loss)/d(logits), accumulated over target positions.
  std::vector<double> dz(vocab, 0.0);
  std::vector<double> probs;
  double loss = 0.0;
  for (int token : target) {
    auto z = base;
    add_context(z, counts);
    const double lse = log_softmax_into(z, probs);
    loss += lse - z[static_cast<std::size_t>(token)];
    for (std::size_t v = 0; v < vocab; ++v) dz[v] += probs[v];
    dz[static_cast<std::size_t>(token)] -= 1.0;
    counts[static_cast<std::size_t>(token)] += 1.0;
  }

  LossAndGradient out;
  out.loss = std::max(loss, 0.0);
  out.gradient.shape = image.shape();
  out.gradient.values.assign(image.size(), 0.0);
  for (std::size_t v = 0; v < vocab; ++v) {
    if (dz[v] == 0.0) continue;
    const auto& row = params_.weight[v];
    for (std::size_t i = 0; i < row.size(); ++i) {
      out.gradient.values[i] += dz[v] * row[i];
    }
  }
  return out;
}

std::string ToyModel::generate(const Image& image, const PromptSpec& spec,
                               int max_new_tokens, Decoding) {
  if (max_new_tokens < 1) throw AdapterError("max_new_tokens must be >= 1");
  auto counts = counts_of(tokenize_context(assemble_teacher_forcing(spec, framing())));
  const auto base = pixel_logits(image);
  std::string out;
  for (int step = 0; step < max_new_tokens; ++step) {
    auto z = base;
    add_context(z, counts);
    // Ties resolve to the lowest vocabulary index.
    const auto best = static_cast<std::size_t>(
        std::max_element(z.begin(), z.end()) - z.begin());
    const std::string& word = params_.vocabulary[best];
    if (params_.eos && word == *params_.eos) break;
    if (!out.empty()) out += ' ';
    out += word;
    counts[best] += 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generation-only adapters

std::string ConstantAdapter::generate(const Image&, const PromptSpec&,
                                      int max_new_tokens, Decoding) {
  if (max_new_tokens < 1) throw AdapterError("max_new_tokens must be >= 1");
  return output_;
}

std::string replay_key(const Image& image, const PromptSpec& spec,
                       int max_new_tokens) {
  std::string material = serialize(spec);
  const auto& s = image.shape();
  material += "shape=" + std::to_string(s.channels) + "x" +
              std::to_string(s.height) + "x" + std::to_string(s.width) + "\n";
  std::array<char, 32> buf{};
  for (double v : image.pixels()) {
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    material.append(buf.data(), end);
    material += ',';
  }
  material += "\nmax_new_tokens=" + std::to_string(max_new_tokens);
  return sha256_hex(material);
}

ReplayAdapter ReplayAdapter::load(const std::filesystem::path& path,
                                  std::optional<std::string> fallback) {
  std::ifstream in(path);
  if (!in) throw AdapterError("cannot open replay file " + path.string());
  std::map<std::string, std::string> responses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    responses[j.at("key").get<std::string>()] = j.at("output").get<std::string>();
  }
  return ReplayAdapter(std::move(responses), std::move(fallback));
}

std::string ReplayAdapter::generate(const Image& image, const PromptSpec& spec,
                                    int max_new_tokens, Decoding) {
  if (max_new_tokens < 1) throw AdapterError("max_new_tokens must be >= 1");
  auto it = responses_.find(replay_key(image, spec, max_new_tokens));
  if (it != responses_.end()) return it->second;
  if (fallback_) return *fallback_;
  throw AdapterError("no recorded response for this request");
}

std::string RecordingAdapter::generate(const Image& image, const PromptSpec& spec,
                                       int max_new_tokens, Decoding decoding) {
  auto output = inner_->generate(image, spec, max_new_tokens, decoding);
  recorded_[replay_key(image, spec, max_new_tokens)] = output;
  return output;
}

void RecordingAdapter::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw AdapterError("cannot write replay file " + path.string());
  for (const auto& [key, output] : recorded_) {
    out << nlohmann::json{{"key", key}, {"output", output}}.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Registry

namespace {

std::filesystem::path resolve(const std::filesystem::path& base,
                              const std::string& path) {
  std::filesystem::path p(path);
  return p.is_absolute() ? p : base / p;
}

std::optional<std::string> optional_string(const nlohmann::json& j,
                                           const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<std::string>();
}

}  // namespace

AdapterRegistry AdapterRegistry::with_builtins() {
  AdapterRegistry registry;
  registry.add("toy", [](const nlohmann::json& d, const std::filesystem::path& base) {
    if (d.contains("model")) {
      return std::unique_ptr<ModelAdapter>(
          std::make_unique<ToyModel>(toy_params_from_json(d.at("model"))));
    }
    return std::unique_ptr<ModelAdapter>(std::make_unique<ToyModel>(
        load_toy_params(resolve(base, d.at("params").get<std::string>()))));
  });
  registry.add("constant", [](const nlohmann::json& d, const std::filesystem::path&) {
    return std::unique_ptr<ModelAdapter>(
        std::make_unique<ConstantAdapter>(d.at("output").get<std::string>()));
  });
  registry.add("replay", [](const nlohmann::json& d, const std::filesystem::path& base) {
    return std::unique_ptr<ModelAdapter>(std::make_unique<ReplayAdapter>(
        ReplayAdapter::load(resolve(base, d.at("responses").get<std::string>()),
                            optional_string(d, "fallback"))));
  });
  return registry;
}

void AdapterRegistry::add(std::string name, Factory factory) {
  factories_[std::move(name)] = std::move(factory);
}

bool AdapterRegistry::contains(std::string_view name) const {
  return factories_.find(name) != factories_.end();
}

std::unique_ptr<ModelAdapter> AdapterRegistry::create(
    const nlohmann::json& description, const std::filesystem::path& base_dir) const {
  const auto name = description.at("name").get<std::string>();
  auto it = factories_.find(name);
  if (it == factories_.end()) throw AdapterError("unknown adapter '" + name + "'");
  return it->second(description, base_dir);
}

}  // namespace advrobust
