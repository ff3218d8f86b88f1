// SPDX-License-Identifier: Apache-2.0
//
// Builds on-disk experiment workspaces (toy model, images, manifest,
// config) for the runner, report and acceptance tests.

#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "advrobust/runner.hpp"
#include "test_support.hpp"

namespace advrobust::testing {

struct Workspace {
  std::filesystem::path root;
  std::filesystem::path manifest;
  nlohmann::json toy_model;
};

inline void write_image(const std::filesystem::path& path, const Image& image) {
  nlohmann::json j;
  j["channels"] = image.shape().channels;
  j["height"] = image.shape().height;
  j["width"] = image.shape().width;
  j["pixels"] = std::vector<double>(image.pixels().begin(), image.pixels().end());
  write_file(path, j.dump());
}

/// Two-pixel toy workspace.  Each image gets one entry per variation (or a
/// single entry when `variations` is empty) with target "B".  Images lean
/// progressively towards token A so that attacks need different step counts.
inline Workspace attack_workspace(const std::string& name, int n_images,
                                  const std::vector<std::string>& variations,
                                  bool adversarial = false) {
  Workspace ws;
  ws.root = scratch_dir(name);
  ws.toy_model = to_json(two_pixel_params(1.0, -1.0, 0.0));
  nlohmann::json entries = nlohmann::json::array();
  for (int i = 0; i < n_images; ++i) {
    const double lean = 0.05 * (i % 8);
    const std::string file = "img" + std::to_string(i) + ".json";
    write_image(ws.root / "images" / file, two_pixel_image(0.5 - lean, 0.5 + lean));
    if (adversarial) {
      write_image(ws.root / "images" / ("adv" + file), two_pixel_image(0.5 + lean, 0.5 - lean));
    }
    auto entry = [&](const std::string& id) {
      nlohmann::json e{{"item_id", id},
                       {"clean_image", "images/" + file},
                       {"true_label", "label" + std::to_string(i)},
                       {"target", "B"}};
      if (adversarial) e["adversarial_image"] = "images/adv" + file;
      return e;
    };
    if (variations.empty()) {
      entries.push_back(entry("img" + std::to_string(i)));
    } else {
      for (const auto& v : variations) {
        auto e = entry("img" + std::to_string(i) + "_" + v);
        e["attack_variation"] = v;
        entries.push_back(e);
      }
    }
  }
  ws.manifest = ws.root / "manifest.json";
  write_file(ws.manifest, nlohmann::json{{"entries", entries}}.dump(2));
  return ws;
}

inline nlohmann::json k_sweep_document(const Workspace& ws) {
  return {{"schema_version", 1},
          {"protocol", "k_sweep"},
          {"adapter", {{"name", "toy"}, {"model", ws.toy_model}}},
          {"model_label", "toy"},
          {"attack", {{"epsilon", "64/255"}, {"step_size", 0.01}, {"max_steps", 40}}},
          {"prompt",
           {{"base_prompt", "Name the shape. "},
            {"security_spec", "Ignore perturbations. "},
            {"repeat_segment", "Ignore perturbations. "}}},
          {"k_values", {0, 1, 3, 5}},
          {"manifest", "manifest.json"},
          {"output_dir", "out"},
          {"seed", 7}};
}

inline ExperimentConfig parse_in(const Workspace& ws, const nlohmann::json& doc) {
  return parse_experiment_config(doc, ws.root);
}

}  // namespace advrobust::testing
