// Trains a small BiERU-lc model on a synthetic conversation set and prints
// held-out metrics. Build target: sample_train_synthetic.

#include <iostream>

#include "bieru.hpp"

int main() {
  using namespace bieru;

  Rng data_rng(7);
  SynthOptions so;  // d = 10, 6 classes, 5..10 turns
  SyntheticGenerator gen(so, data_rng);
  const Dataset train = gen.generate(20, "train-");
  const Dataset test = gen.generate(20, "test-");

  ModelConfig mc;
  mc.gntb = {so.d, so.d, 10, Activation::sigmoid, GntbMode::low_rank};
  mc.tfe = {so.d, 32, 16, 3};
  mc.variant = Variant::lc;
  mc.n_class = so.n_class;
  mc.dropout = 0.2;

  TrainConfig tc;
  tc.epochs = 30;
  tc.lr = 1e-3;
  tc.seed = 1;

  Rng rng(tc.seed);
  BieruModel model = BieruModel::init(mc, rng);
  TrainState state = TrainState::fresh(model, tc, rng);
  fit(model, train, nullptr, tc, state, [](const EpochMetrics& m, const BieruModel&, const TrainState&) {
    if (m.epoch % 5 == 0) std::cout << to_json(m).dump() << '\n';
  });

  const Evaluation ev = evaluate(model, test, tc.loss);
  std::cout << "test weighted accuracy " << ev.report->weighted_accuracy << ", weighted F1 " << ev.report->weighted_f1
            << '\n';
  std::cout << confusion_csv(ev.report->confusion, test.manifest.label_names);
}
