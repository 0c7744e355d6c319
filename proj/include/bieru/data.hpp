#pragma once

// Conversation datasets.
//
// File format: JSON Lines, one conversation per line:
//   {"id": "...", "utterances": [{"features": [..], "label": 3, "speaker": "A"}, ...]}
// Regression files use "intensity": <number> instead of "label". Speaker
// tags are kept but never read by the model.
//
// Sidecar manifest `<file>.manifest.json`:
//   {"task": "classify", "d": 100, "n_class": 6, "label_names": [...],
//    "conversations": 31, "utterances": 1623}
// Counts in the sidecar, when present, must match the file.

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bieru/heads_loss.hpp"
#include "bieru/numkit.hpp"
#include "bieru/objective.hpp"

namespace bieru {

struct Utterance {
  Vec features;
  std::size_t label = 0;
  double intensity = 0.0;
  std::string speaker;
};

struct Conversation {
  std::string id;
  std::vector<Utterance> utterances;

  std::vector<Vec> features() const {
    std::vector<Vec> out;
    out.reserve(utterances.size());
    for (const auto& u : utterances) out.push_back(u.features);
    return out;
  }

  Targets targets() const {
    Targets t;
    for (const auto& u : utterances) {
      t.labels.push_back(u.label);
      t.intensities.push_back(u.intensity);
    }
    return t;
  }
};

struct DatasetManifest {
  Task task = Task::classify;
  std::size_t d = 0;
  std::size_t n_class = 0;  // 0 for regression
  std::vector<std::string> label_names;
  std::size_t conversations = 0;
  std::size_t utterances = 0;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Conversation> conversations;
};

inline DatasetManifest recount(const Dataset& ds) {
  DatasetManifest m = ds.manifest;
  m.conversations = ds.conversations.size();
  m.utterances = 0;
  for (const auto& c : ds.conversations) m.utterances += c.utterances.size();
  return m;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["task"] = std::string(to_string(m.task));
  j["d"] = m.d;
  if (m.task == Task::classify) {
    j["n_class"] = m.n_class;
    j["label_names"] = m.label_names;
  }
  j["conversations"] = m.conversations;
  j["utterances"] = m.utterances;
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.task = parse_task(j.at("task").get<std::string>());
    m.d = j.at("d").get<std::size_t>();
    if (m.task == Task::classify) {
      m.n_class = j.at("n_class").get<std::size_t>();
      if (j.contains("label_names")) m.label_names = j["label_names"].get<std::vector<std::string>>();
    }
    if (j.contains("conversations")) m.conversations = j["conversations"].get<std::size_t>();
    if (j.contains("utterances")) m.utterances = j["utterances"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, std::string("manifest: ") + e.what());
  }
  if (!m.label_names.empty() && m.label_names.size() != m.n_class) {
    throw Error(ErrorKind::data, "manifest: label_names length != n_class");
  }
  return m;
}

inline std::string manifest_path(const std::string& dataset_path) { return dataset_path + ".manifest.json"; }

namespace detail {

[[noreturn]] inline void data_error(const std::string& path, std::size_t line, const std::string& msg) {
  std::ostringstream os;
  os << path << ":" << line << ": " << msg;
  throw Error(ErrorKind::data, os.str());
}

}  // namespace detail

/// Parses and validates a dataset. `expected`, when given, must agree on
/// task, d, n_class, and on the counts it sets to nonzero values.
inline Dataset load_dataset(const std::string& path, const std::optional<DatasetManifest>& expected = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open dataset " + path);

  std::optional<DatasetManifest> sidecar;
  if (std::filesystem::exists(manifest_path(path))) {
    std::ifstream ms(manifest_path(path));
    try {
      sidecar = manifest_from_json(nlohmann::json::parse(ms));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::data, manifest_path(path) + ": " + e.what());
    }
  }

  Dataset ds;
  Task task = sidecar ? sidecar->task : Task::classify;
  bool task_known = sidecar.has_value();
  std::size_t d = sidecar ? sidecar->d : 0;
  std::size_t max_label = 0;
  std::size_t label_bound = sidecar ? sidecar->n_class : 0;
  if (!label_bound && expected && expected->task == Task::classify) label_bound = expected->n_class;

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      detail::data_error(path, lineno, std::string("malformed record: ") + e.what());
    }
    Conversation conv;
    if (!j.is_object() || !j.contains("utterances") || !j["utterances"].is_array()) {
      detail::data_error(path, lineno, "record needs an 'utterances' array");
    }
    if (j.contains("id") && !j["id"].is_string()) detail::data_error(path, lineno, "'id' must be a string");
    conv.id = j.contains("id") ? j["id"].get<std::string>() : "line" + std::to_string(lineno);
    const auto& utts = j["utterances"];
    if (utts.empty()) detail::data_error(path, lineno, "conversation '" + conv.id + "' is empty");
    for (std::size_t t = 0; t < utts.size(); ++t) {
      const auto& uj = utts[t];
      const std::string where = "utterance " + std::to_string(t) + ": ";
      if (!uj.is_object() || !uj.contains("features") || !uj["features"].is_array()) {
        detail::data_error(path, lineno, where + "missing 'features' array");
      }
      Utterance u;
      for (const auto& x : uj["features"]) {
        if (!x.is_number()) detail::data_error(path, lineno, where + "non-numeric feature");
        u.features.push_back(x.get<double>());
      }
      if (!all_finite(u.features)) detail::data_error(path, lineno, where + "non-finite feature");
      if (d == 0) d = u.features.size();
      if (u.features.size() != d) {
        std::ostringstream os;
        os << where << u.features.size() << " features, dataset dimension is " << d;
        detail::data_error(path, lineno, os.str());
      }
      const bool has_label = uj.contains("label");
      const bool has_intensity = uj.contains("intensity");
      if (!task_known) {
        task = has_label ? Task::classify : Task::regress;
        task_known = true;
      }
      if (task == Task::classify) {
        if (!has_label || !uj["label"].is_number_integer()) {
          detail::data_error(path, lineno, where + "missing integer 'label'");
        }
        const auto raw = uj["label"].get<long long>();
        if (raw < 0 || (label_bound && static_cast<std::size_t>(raw) >= label_bound)) {
          std::ostringstream os;
          os << where << "label " << raw << " out of range [0, " << label_bound << ")";
          detail::data_error(path, lineno, os.str());
        }
        u.label = static_cast<std::size_t>(raw);
        max_label = std::max(max_label, u.label);
      } else {
        if (!has_intensity || !uj["intensity"].is_number()) {
          detail::data_error(path, lineno, where + "missing numeric 'intensity'");
        }
        u.intensity = uj["intensity"].get<double>();
        if (!std::isfinite(u.intensity)) detail::data_error(path, lineno, where + "non-finite intensity");
      }
      if (uj.contains("speaker") && uj["speaker"].is_string()) u.speaker = uj["speaker"].get<std::string>();
      conv.utterances.push_back(std::move(u));
    }
    ds.conversations.push_back(std::move(conv));
  }
  if (ds.conversations.empty()) throw Error(ErrorKind::data, path + ": no conversations");

  if (sidecar) {
    ds.manifest = *sidecar;
  } else {
    ds.manifest.task = task;
    ds.manifest.d = d;
    ds.manifest.n_class = task == Task::classify ? max_label + 1 : 0;
  }
  const DatasetManifest counted = recount(ds);
  if (sidecar && ((sidecar->conversations && sidecar->conversations != counted.conversations) ||
                  (sidecar->utterances && sidecar->utterances != counted.utterances))) {
    std::ostringstream os;
    os << path << ": manifest declares " << sidecar->conversations << " conversations / " << sidecar->utterances
       << " utterances, file holds " << counted.conversations << " / " << counted.utterances;
    throw Error(ErrorKind::data, os.str());
  }
  ds.manifest = counted;

  if (expected) {
    std::ostringstream os;
    const auto& e = *expected;
    if (e.task != counted.task) os << "task " << to_string(counted.task) << " != expected " << to_string(e.task) << "; ";
    if (e.d && e.d != counted.d) os << "d " << counted.d << " != expected " << e.d << "; ";
    if (e.task == Task::classify && e.n_class && e.n_class != counted.n_class) {
      os << "n_class " << counted.n_class << " != expected " << e.n_class << "; ";
    }
    if (e.conversations && e.conversations != counted.conversations) {
      os << "conversations " << counted.conversations << " != expected " << e.conversations << "; ";
    }
    if (e.utterances && e.utterances != counted.utterances) {
      os << "utterances " << counted.utterances << " != expected " << e.utterances << "; ";
    }
    if (!os.str().empty()) throw Error(ErrorKind::data, path + ": manifest mismatch: " + os.str());
  }
  return ds;
}

inline nlohmann::json conversation_to_json(const Conversation& c, Task task) {
  nlohmann::json j;
  j["id"] = c.id;
  auto& arr = j["utterances"] = nlohmann::json::array();
  for (const auto& u : c.utterances) {
    nlohmann::json uj;
    uj["features"] = u.features;
    if (task == Task::classify) {
      uj["label"] = u.label;
    } else {
      uj["intensity"] = u.intensity;
    }
    if (!u.speaker.empty()) uj["speaker"] = u.speaker;
    arr.push_back(std::move(uj));
  }
  return j;
}

/// Writes the JSON Lines file and its sidecar manifest. `extra` keys are
/// merged into the manifest record.
inline void write_dataset(const std::string& path, const Dataset& ds, const nlohmann::json& extra = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write dataset " + path);
  for (const auto& c : ds.conversations) out << conversation_to_json(c, ds.manifest.task).dump() << '\n';
  nlohmann::json m = manifest_to_json(recount(ds));
  if (extra.is_object()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  }
  std::ofstream ms(manifest_path(path), std::ios::binary);
  if (!ms) throw Error(ErrorKind::io, "cannot write manifest for " + path);
  ms << m.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic conversations

struct SynthOptions {
  std::size_t d = 10;
  std::size_t n_class = 6;  // latent states; also the label count when classifying
  Task task = Task::classify;
  std::size_t min_turns = 5;
  std::size_t max_turns = 10;
  double separation = 5.0;
  double shift_prob = 0.2;
  double noise = 1.0;
  double intensity_noise = 0.1;

  void validate() const {
    if (d < 1 || n_class < 1) throw Error(ErrorKind::config, "synth: d and n_class must be >= 1");
    if (min_turns < 1 || max_turns < min_turns) throw Error(ErrorKind::config, "synth: bad turn range");
    if (!(separation >= 0.0)) throw Error(ErrorKind::config, "synth: separation must be >= 0");
    if (!(shift_prob >= 0.0 && shift_prob <= 1.0)) throw Error(ErrorKind::config, "synth: shift_prob must lie in [0, 1]");
  }
};

/// Each latent class owns a Gaussian cluster center drawn once per
/// generator (per-coordinate N(0, (separation/2)²)). Utterances are center
/// plus N(0, noise²) per coordinate; between turns the latent class switches
/// to a different one with probability shift_prob. Regression intensities
/// are the center projected on a fixed unit direction plus noise.
class SyntheticGenerator {
 public:
  SyntheticGenerator(const SynthOptions& opts, Rng& rng) : opts_(opts), rng_(rng) {
    opts_.validate();
    centers_.resize(opts_.n_class);
    for (auto& c : centers_) {
      c.resize(opts_.d);
      for (double& x : c) x = 0.5 * opts_.separation * rng_.normal();
    }
    direction_.resize(opts_.d);
    double norm = 0.0;
    for (double& x : direction_) {
      x = rng_.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : direction_) x = norm > 0.0 ? x / norm : 0.0;
  }

  const std::vector<Vec>& centers() const { return centers_; }

  Dataset generate(std::size_t n_conversations, const std::string& id_prefix = "conv") {
    Dataset ds;
    ds.manifest.task = opts_.task;
    ds.manifest.d = opts_.d;
    if (opts_.task == Task::classify) {
      ds.manifest.n_class = opts_.n_class;
      for (std::size_t c = 0; c < opts_.n_class; ++c) ds.manifest.label_names.push_back("class" + std::to_string(c));
    }
    for (std::size_t i = 0; i < n_conversations; ++i) {
      Conversation conv;
      conv.id = id_prefix + std::to_string(i);
      const std::size_t turns = opts_.min_turns + static_cast<std::size_t>(rng_.below(opts_.max_turns - opts_.min_turns + 1));
      std::size_t state = static_cast<std::size_t>(rng_.below(opts_.n_class));
      for (std::size_t t = 0; t < turns; ++t) {
        if (t > 0 && opts_.n_class > 1 && rng_.uniform() < opts_.shift_prob) {
          const std::size_t jump = 1 + static_cast<std::size_t>(rng_.below(opts_.n_class - 1));
          state = (state + jump) % opts_.n_class;
        }
        Utterance u;
        u.features.resize(opts_.d);
        for (std::size_t j = 0; j < opts_.d; ++j) u.features[j] = centers_[state][j] + opts_.noise * rng_.normal();
        u.label = state;
        if (opts_.task == Task::regress) {
          u.intensity = dot(direction_, centers_[state]) + opts_.intensity_noise * rng_.normal();
          u.label = 0;
        }
        u.speaker = (t % 2 == 0) ? "A" : "B";
        conv.utterances.push_back(std::move(u));
      }
      ds.conversations.push_back(std::move(conv));
    }
    ds.manifest = recount(ds);
    return ds;
  }

 private:
  SynthOptions opts_;
  Rng& rng_;
  std::vector<Vec> centers_;
  Vec direction_;
};

inline Dataset synth_dataset(Rng& rng, std::size_t n_conversations, const SynthOptions& opts) {
  SyntheticGenerator gen(opts, rng);
  return gen.generate(n_conversations);
}

}  // namespace bieru
