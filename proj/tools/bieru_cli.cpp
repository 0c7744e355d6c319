// bieru: command-line front end.
//
//   bieru synth     --out DIR --seed N [...]
//   bieru train     --train FILE --out CKPT --seed N [...]
//   bieru eval      --checkpoint CKPT --data FILE [--confusion CSV] [--features CSV]
//   bieru predict   --checkpoint CKPT --data FILE [--out JSONL]
//   bieru gradcheck [--seed N] [--corrupt TENSOR]
//   bieru params    [--d 100 --k 100 --rank 10 ...] | --checkpoint CKPT
//
// Every subcommand accepts --config FILE, a JSON object whose keys are long
// flag names; flags given on the command line take precedence.
//
// Exit status: 0 success, 1 gradcheck failure, 2 error (one line on stderr,
// "error[<kind>]: <message>").

#include <cstdio>
#include <algorithm>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bieru.hpp"

namespace {

using nlohmann::json;
using namespace bieru;

// --config FILE: a flat JSON object keyed by long flag names (underscores
// may stand in for hyphens). Values fill only the options that were not
// given on the command line.
void add_config(CLI::App* sub, std::string& path) {
  sub->add_option("--config", path, "JSON config file (flat object of flag names); flags take precedence");
}

void apply_config(CLI::App* sub, const std::string& path) {
  if (path.empty()) return;
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, path + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::config, path + ": top level must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::string name = it.key();
    for (auto& ch : name) {
      if (ch == '_') ch = '-';
    }
    CLI::Option* opt = name == "config" ? nullptr : sub->get_option_no_throw("--" + name);
    if (!opt) throw Error(ErrorKind::config, path + ": unknown key '" + it.key() + "' for " + sub->get_name());
    if (opt->count() > 0) continue;
    const json& v = *it;
    std::string text;
    if (v.is_string()) {
      text = v.get<std::string>();
    } else if (v.is_boolean()) {
      text = v.get<bool>() ? "true" : "false";
    } else if (v.is_number()) {
      text = v.dump();
    } else {
      throw Error(ErrorKind::config, path + ": value of '" + it.key() + "' must be a string, number or boolean");
    }
    try {
      opt->add_result(text);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw Error(ErrorKind::config, path + ": bad value for '" + it.key() + "': " + e.what());
    }
  }
}

std::pair<std::size_t, std::size_t> parse_turns(const std::string& s) {
  const auto dots = s.find("..");
  try {
    if (dots == std::string::npos) {
      const auto n = std::stoul(s);
      return {n, n};
    }
    return {std::stoul(s.substr(0, dots)), std::stoul(s.substr(dots + 2))};
  } catch (const std::exception&) {
    throw Error(ErrorKind::config, "--turns expects A..B, got '" + s + "'");
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path);
  out << text;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out;
  std::size_t conversations = 20;
  std::string turns = "5..10";
  std::size_t d = 10;
  std::size_t classes = 6;
  std::string task = "classify";
  double separation = 5.0;
  double shift_prob = 0.2;
  std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a) {
  SynthOptions o;
  o.d = a.d;
  o.n_class = a.classes;
  o.task = parse_task(a.task);
  std::tie(o.min_turns, o.max_turns) = parse_turns(a.turns);
  o.separation = a.separation;
  o.shift_prob = a.shift_prob;
  o.validate();

  const json run_config{{"conversations", a.conversations}, {"turns", a.turns}, {"d", a.d},
                        {"classes", a.classes}, {"task", a.task}, {"separation", a.separation},
                        {"shift-prob", a.shift_prob}, {"seed", a.seed}};
  std::filesystem::create_directories(a.out);
  Rng rng(a.seed);
  SyntheticGenerator gen(o, rng);
  json summary{{"run_config", run_config}, {"files", json::array()}};
  for (const char* split : {"train", "val", "test"}) {
    const Dataset ds = gen.generate(a.conversations, std::string(split) + "-");
    const std::string path = (std::filesystem::path(a.out) / (std::string(split) + ".jsonl")).string();
    write_dataset(path, ds, {{"split", split}, {"run_config", run_config}});
    summary["files"].push_back({{"path", path}, {"conversations", ds.conversations.size()},
                                {"utterances", recount(ds).utterances}});
  }
  std::cout << summary.dump() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// model flags shared by train and params

struct ModelArgs {
  std::size_t d = 100;
  std::size_t k = 0;  // 0: same as d
  std::size_t rank = 10;
  std::string activation;  // empty: sigmoid for classify, relu for regress
  std::string mode = "low-rank";
  std::size_t hidden = 100;
  std::size_t filters = 50;
  std::size_t kernel = 3;
  std::string variant = "lc";
  std::string task = "classify";
  std::size_t classes = 6;
  double dropout = 0.8;
  std::string ablation = "full";
  bool head_bias = false;
};

void add_model_flags(CLI::App* sub, ModelArgs& m, bool with_data_dims) {
  if (with_data_dims) {
    sub->add_option("--d", m.d, "Utterance feature dimension")->capture_default_str();
    sub->add_option("--task", m.task, "classify | regress")->capture_default_str();
    sub->add_option("--classes", m.classes, "Number of classes (classify)")->capture_default_str();
  }
  sub->add_option("--k", m.k, "GNTB slices (default: d)");
  sub->add_option("--rank", m.rank, "Low-rank factor rank r")->capture_default_str();
  sub->add_option("--activation", m.activation, "GNTB activation tanh | sigmoid | relu (default by task)");
  sub->add_option("--mode", m.mode, "low-rank | full-rank")->capture_default_str();
  sub->add_option("--hidden", m.hidden, "LSTM hidden size H")->capture_default_str();
  sub->add_option("--filters", m.filters, "Convolution filters F")->capture_default_str();
  sub->add_option("--kernel", m.kernel, "Convolution kernel length K")->capture_default_str();
  sub->add_option("--variant", m.variant, "gc | lc")->capture_default_str();
  sub->add_option("--dropout", m.dropout, "Dropout rate on GNTB and TFE outputs")->capture_default_str();
  sub->add_option("--ablation", m.ablation, "full | gntb-only | tfe-only")->capture_default_str();
  sub->add_flag("--head-bias", m.head_bias, "Add a bias to the output head");
}

ModelConfig build_model_config(const ModelArgs& m) {
  ModelConfig c;
  c.task = parse_task(m.task);
  c.gntb.d = m.d;
  c.gntb.k = m.k == 0 ? m.d : m.k;
  c.gntb.rank = m.rank;
  c.gntb.activation = m.activation.empty() ? (c.task == Task::classify ? Activation::sigmoid : Activation::relu)
                                           : parse_activation(m.activation);
  c.gntb.mode = parse_gntb_mode(m.mode);
  c.tfe = {m.d, m.hidden, m.filters, m.kernel};
  c.variant = parse_variant(m.variant);
  c.n_class = c.task == Task::classify ? m.classes : 0;
  c.dropout = m.dropout;
  c.ablation = parse_ablation(m.ablation);
  c.head_bias = m.head_bias;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  ModelArgs model;
  std::string train;
  std::string val;
  std::string out;
  std::string metrics;
  std::string resume;
  std::size_t epochs = 100;
  double lr = 1e-4;
  double l2 = 0.001;
  std::string l2_form = "squared-norm";
  std::uint64_t seed = 0;
  std::size_t patience = 0;
  std::size_t save_every = 0;
};

json train_run_config(const TrainArgs& a, const ModelConfig& mc, const LossConfig& loss) {
  json j = to_json(mc);
  j.erase("n_class");
  j.erase("head_bias");
  j["classes"] = mc.n_class;
  j["head-bias"] = mc.head_bias;
  j["train"] = a.train;
  if (!a.val.empty()) j["val"] = a.val;
  j["out"] = a.out;
  if (!a.metrics.empty()) j["metrics"] = a.metrics;
  j["epochs"] = a.epochs;
  j["lr"] = a.lr;
  j["l2"] = loss.lambda;
  j["l2-form"] = std::string(to_string(loss.l2_form));
  j["seed"] = a.seed;
  j["patience"] = a.patience;
  j["save-every"] = a.save_every;
  return j;
}

int run_train(TrainArgs a) {
  const Dataset train = load_dataset(a.train);
  std::optional<Dataset> val;
  if (!a.val.empty()) {
    DatasetManifest expect = train.manifest;
    expect.conversations = expect.utterances = 0;
    val = load_dataset(a.val, expect);
  }

  BieruModel model;
  TrainState state;
  TrainConfig tc;
  json run_config;
  if (!a.resume.empty()) {
    Checkpoint ck = load_checkpoint(a.resume);
    if (!ck.train_state) throw Error(ErrorKind::checkpoint_header, a.resume + ": no training state to resume from");
    model = std::move(ck.model);
    state = std::move(*ck.train_state);
    // Model, optimizer and loss settings come from the checkpoint; --epochs
    // sets the new total.
    run_config = ck.run_config;
    tc.lr = state.adam.hp.lr;
    tc.loss.lambda = run_config.value("l2", a.l2);
    tc.loss.l2_form = parse_l2_form(run_config.value("l2-form", a.l2_form));
    tc.patience = run_config.value("patience", a.patience);
    tc.seed = run_config.value("seed", a.seed);
    run_config["epochs"] = a.epochs;
    run_config["resume"] = a.resume;
    run_config["out"] = a.out;
    if (!a.metrics.empty()) run_config["metrics"] = a.metrics;
  } else {
    a.model.d = train.manifest.d;
    a.model.task = std::string(to_string(train.manifest.task));
    if (train.manifest.task == Task::classify) a.model.classes = train.manifest.n_class;
    const ModelConfig mc = build_model_config(a.model);
    tc.lr = a.lr;
    tc.loss.lambda = a.l2;
    tc.loss.l2_form = parse_l2_form(a.l2_form);
    tc.loss.validate();
    tc.seed = a.seed;
    tc.patience = a.patience;
    Rng rng(a.seed);
    model = BieruModel::init(mc, rng);
    state = TrainState::fresh(model, tc, rng);
    run_config = train_run_config(a, mc, tc.loss);
  }
  tc.epochs = a.epochs;
  if (model.config.d() != train.manifest.d || model.config.task != train.manifest.task) {
    throw Error(ErrorKind::data, a.train + ": dataset does not match the model (d or task)");
  }

  std::optional<std::ofstream> metrics;
  if (!a.metrics.empty()) {
    metrics.emplace(a.metrics, std::ios::binary | (a.resume.empty() ? std::ios::trunc : std::ios::app));
    if (!*metrics) throw Error(ErrorKind::io, "cannot write " + a.metrics);
  }
  const std::string header = json{{"run_config", run_config}}.dump();
  std::cout << header << '\n';
  if (metrics) *metrics << header << '\n';

  auto save = [&](const BieruModel& m, const TrainState& s) { save_checkpoint(a.out, Checkpoint{m, s, run_config}); };
  fit(model, train, val ? &*val : nullptr, tc, state, [&](const EpochMetrics& m, const BieruModel& mm, const TrainState& s) {
    const std::string line = to_json(m).dump();
    std::cout << line << '\n' << std::flush;
    if (metrics) *metrics << line << '\n' << std::flush;
    if (a.save_every > 0 && s.epoch % a.save_every == 0) save(mm, s);
  });
  save(model, state);
  return 0;
}

// ---------------------------------------------------------------------------
// eval / predict

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string confusion;
  std::string features;
  std::string out;
  std::string manifest;
};

Dataset load_for_model(const std::string& path, const BieruModel& model, const std::string& manifest_file) {
  DatasetManifest expect;
  if (!manifest_file.empty()) {
    std::ifstream in(manifest_file);
    if (!in) throw Error(ErrorKind::io, "cannot open " + manifest_file);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw Error(ErrorKind::data, manifest_file + ": " + e.what());
    }
    expect = manifest_from_json(j);
  }
  expect.task = model.config.task;
  expect.d = model.config.d();
  expect.n_class = model.config.task == Task::classify ? model.config.n_class : 0;
  return load_dataset(path, expect);
}

std::vector<std::string> label_names(const Dataset& ds, std::size_t n_class) {
  if (ds.manifest.label_names.size() == n_class) return ds.manifest.label_names;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < n_class; ++c) names.push_back(std::to_string(c));
  return names;
}

int run_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset ds = load_for_model(a.data, ck.model, a.manifest);
  const LossConfig loss{ck.run_config.value("l2", 0.001), parse_l2_form(ck.run_config.value("l2-form", "squared-norm"))};
  const Evaluation ev = evaluate(ck.model, ds, loss);

  json out;
  out["data"] = a.data;
  out["conversations"] = ds.manifest.conversations;
  out["utterances"] = ds.manifest.utterances;
  out["mean_loss"] = ev.mean_loss;
  if (ev.report) {
    const auto names = label_names(ds, ck.model.config.n_class);
    out["weighted_accuracy"] = ev.report->weighted_accuracy;
    out["weighted_f1"] = ev.report->weighted_f1;
    out["macro_accuracy"] = ev.report->macro_accuracy;
    for (std::size_t c = 0; c < ev.report->per_class.size(); ++c) {
      const auto& s = ev.report->per_class[c];
      out["per_class"][names[c]] = {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1},
                                    {"support", s.support}};
    }
    if (!a.confusion.empty()) write_text(a.confusion, confusion_csv(ev.report->confusion, names));
  } else {
    out["pearson_r"] = ev.pearson ? json(*ev.pearson) : json(nullptr);
    out["mae"] = ev.mae.value_or(0.0);
    if (!a.confusion.empty()) throw Error(ErrorKind::config, "--confusion applies to classification models only");
  }
  if (!a.features.empty()) {
    std::ofstream f(a.features, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorKind::io, "cannot write " + a.features);
    char buf[32];
    for (const auto& row : ev.features) {
      for (std::size_t j = 0; j < row.size(); ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", row[j]);
        f << (j ? "," : "") << buf;
      }
      f << '\n';
    }
  }
  out["run_config"] = ck.run_config;
  const std::string text = out.dump();
  std::cout << text << '\n';
  if (!a.out.empty()) write_text(a.out, text + "\n");
  return 0;
}

int run_predict(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset ds = load_for_model(a.data, ck.model, a.manifest);
  std::optional<std::ofstream> file;
  if (!a.out.empty()) {
    file.emplace(a.out, std::ios::binary | std::ios::trunc);
    if (!*file) throw Error(ErrorKind::io, "cannot write " + a.out);
  }
  std::ostream& os = file ? static_cast<std::ostream&>(*file) : std::cout;
  for (const auto& conv : ds.conversations) {
    const auto fw = bieru_forward(ck.model, conv.features(), false, nullptr);
    const auto hf = head_forward(ck.model.head, fw.features);
    json j{{"id", conv.id}};
    if (ck.model.config.task == Task::classify) {
      j["labels"] = hf.labels;
      j["probabilities"] = hf.cache.outputs;
    } else {
      j["intensities"] = hf.intensities;
    }
    os << j.dump() << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck / params

struct GradcheckArgs {
  GradcheckOptions opts;
  std::string out;
};

int run_gradcheck_cmd(const GradcheckArgs& a) {
  const GradcheckReport r = run_gradcheck(a.opts);
  json j;
  j["pass"] = r.pass();
  j["max_rel_error"] = r.max_rel_error();
  j["tolerance"] = a.opts.tolerance;
  j["h"] = a.opts.h;
  j["seed"] = a.opts.seed;
  auto& arr = j["tensors"] = json::array();
  for (const auto& c : r.checks) arr.push_back(to_json(c));
  const std::string text = j.dump(1);
  std::cout << text << '\n';
  if (!a.out.empty()) write_text(a.out, text + "\n");
  for (const auto& c : r.checks) {
    if (!c.pass) std::cerr << "FAIL " << c.suite << " " << c.tensor << " max_rel_error=" << c.max_rel_error << '\n';
  }
  return r.pass() ? 0 : 1;
}

struct ParamsArgs {
  ModelArgs model;
  std::string checkpoint;
};

int run_params(ParamsArgs a) {
  BieruModel model;
  if (!a.checkpoint.empty()) {
    model = load_checkpoint(a.checkpoint).model;
  } else {
    model = BieruModel::zeros(build_model_config(a.model));
  }
  const ParamReport r = report_params(model);
  json j = to_json(r);
  j["gntb_per_direction"] = r.module("fwd.gntb");
  j["tfe_per_direction"] = r.module("fwd.tfe");
  j["model_config"] = to_json(model.config);
  std::cout << j.dump(1) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BiERU conversational sentiment model: synthesis, training, evaluation and verification"};
  app.require_subcommand(1);

  std::string config_path;
  // Checked after --config is applied, so a config file can supply these.
  std::vector<const CLI::Option*> required;
  auto req = [&required](CLI::Option* o) { required.push_back(o); };

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic train/val/test conversation set");
  add_config(s, config_path);
  req(s->add_option("--out", synth.out, "Output directory"));
  s->add_option("--conversations", synth.conversations, "Conversations per split")->capture_default_str();
  s->add_option("--turns", synth.turns, "Turn range A..B")->capture_default_str();
  s->add_option("--d", synth.d, "Feature dimension")->capture_default_str();
  s->add_option("--classes", synth.classes, "Latent classes")->capture_default_str();
  s->add_option("--task", synth.task, "classify | regress")->capture_default_str();
  s->add_option("--separation", synth.separation, "Cluster separation (0: no class signal)")->capture_default_str();
  s->add_option("--shift-prob", synth.shift_prob, "Per-turn probability of a latent class switch")
      ->capture_default_str();
  req(s->add_option("--seed", synth.seed, "RNG seed"));

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  add_config(t, config_path);
  req(t->add_option("--train", train.train, "Training set (JSON Lines)"));
  t->add_option("--val", train.val, "Validation set");
  req(t->add_option("--out", train.out, "Checkpoint path"));
  t->add_option("--metrics", train.metrics, "Also append per-epoch records to this file");
  t->add_option("--resume", train.resume, "Resume from a checkpoint written by train");
  t->add_option("--epochs", train.epochs, "Total epochs (0 writes the initial checkpoint)")->capture_default_str();
  t->add_option("--lr", train.lr, "Adam learning rate")->capture_default_str();
  t->add_option("--l2", train.l2, "L2 weight lambda")->capture_default_str();
  t->add_option("--l2-form", train.l2_form, "squared-norm | norm")->capture_default_str();
  req(t->add_option("--seed", train.seed, "RNG seed (initialization, shuffling, dropout)"));
  t->add_option("--patience", train.patience, "Early-stopping patience on validation loss (0: off)")
      ->capture_default_str();
  t->add_option("--save-every", train.save_every, "Also checkpoint every N epochs")->capture_default_str();
  add_model_flags(t, train.model, false);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  add_config(e, config_path);
  req(e->add_option("--checkpoint", ev.checkpoint, "Checkpoint path"));
  req(e->add_option("--data", ev.data, "Dataset path"));
  e->add_option("--manifest", ev.manifest, "Expected manifest record; counts are checked");
  e->add_option("--confusion", ev.confusion, "Write the confusion matrix as CSV");
  e->add_option("--features", ev.features, "Write emotion features as CSV, one row per utterance");
  e->add_option("--out", ev.out, "Also write the metrics record here");

  EvalArgs pred;
  auto* p = app.add_subcommand("predict", "Write per-utterance predictions");
  add_config(p, config_path);
  req(p->add_option("--checkpoint", pred.checkpoint, "Checkpoint path"));
  req(p->add_option("--data", pred.data, "Dataset path"));
  p->add_option("--manifest", pred.manifest, "Expected manifest record");
  p->add_option("--out", pred.out, "Output JSON Lines (default: stdout)");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every analytic gradient");
  add_config(g, config_path);
  g->add_option("--seed", gc.opts.seed, "Instance seed")->capture_default_str();
  g->add_option("--tolerance", gc.opts.tolerance, "Max relative error")->capture_default_str();
  g->add_option("--step", gc.opts.h, "Central-difference step h")->capture_default_str();
  g->add_option("--corrupt", gc.opts.corrupt, "Test hook: perturb this tensor's analytic gradient");
  g->add_option("--out", gc.out, "Also write the report here");

  ParamsArgs pa;
  auto* pr = app.add_subcommand("params", "Parameter counts per tensor, module and total");
  add_config(pr, config_path);
  pr->add_option("--checkpoint", pa.checkpoint, "Report on a checkpoint instead of flags");
  add_model_flags(pr, pa.model, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }

  try {
    for (auto* sub : app.get_subcommands()) apply_config(sub, config_path);
    for (auto* sub : app.get_subcommands()) {
      for (auto* o : sub->get_options()) {
        bool needed = std::any_of(required.begin(), required.end(), [o](const CLI::Option* r) { return r == o; });
        if (needed && o->count() == 0) throw Error(ErrorKind::config, o->get_name() + " is required");
      }
    }
    if (*s) return run_synth(synth);
    if (*t) return run_train(train);
    if (*e) return run_eval(ev);
    if (*p) return run_predict(pred);
    if (*g) return run_gradcheck_cmd(gc);
    if (*pr) return run_params(pa);
  } catch (const Error& err) {
    std::cerr << "error[" << to_string(err.kind()) << "]: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error[internal]: " << err.what() << '\n';
    return 2;
  }
  return 0;
}
