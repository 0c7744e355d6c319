#pragma once

// JSON records for configuration structs. The same record syntax is used
// for checkpoint headers, metric logs and CLI config files.

#include <nlohmann/json.hpp>

#include "bieru/heads_loss.hpp"
#include "bieru/model.hpp"

namespace bieru {

inline nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"d", c.gntb.d},
      {"k", c.gntb.k},
      {"rank", c.gntb.rank},
      {"activation", std::string(to_string(c.gntb.activation))},
      {"mode", std::string(to_string(c.gntb.mode))},
      {"hidden", c.tfe.hidden},
      {"filters", c.tfe.filters},
      {"kernel", c.tfe.kernel},
      {"variant", std::string(to_string(c.variant))},
      {"task", std::string(to_string(c.task))},
      {"n_class", c.n_class},
      {"dropout", c.dropout},
      {"ablation", std::string(to_string(c.ablation))},
      {"head_bias", c.head_bias},
  };
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.gntb.d = j.at("d").get<std::size_t>();
    c.gntb.k = j.at("k").get<std::size_t>();
    c.gntb.rank = j.at("rank").get<std::size_t>();
    c.gntb.activation = parse_activation(j.at("activation").get<std::string>());
    c.gntb.mode = parse_gntb_mode(j.at("mode").get<std::string>());
    c.tfe.d = c.gntb.d;
    c.tfe.hidden = j.at("hidden").get<std::size_t>();
    c.tfe.filters = j.at("filters").get<std::size_t>();
    c.tfe.kernel = j.at("kernel").get<std::size_t>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.task = parse_task(j.at("task").get<std::string>());
    c.n_class = j.at("n_class").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.ablation = parse_ablation(j.at("ablation").get<std::string>());
    c.head_bias = j.value("head_bias", false);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("model config: ") + e.what());
  }
  return c;
}

inline nlohmann::json to_json(const LossConfig& c) {
  return {{"lambda", c.lambda}, {"l2_form", std::string(to_string(c.l2_form))}, {"eps", c.eps}};
}

}  // namespace bieru
