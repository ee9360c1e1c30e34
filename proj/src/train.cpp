#include "mtlforge/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mtlforge/rng.hpp"

namespace mtlforge {

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::single_task: return "single_task";
    case Strategy::sequential: return "sequential";
    case Strategy::multi_optimizer: return "multi_optimizer";
    case Strategy::multitask_loss: return "multitask_loss";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "single_task") return Strategy::single_task;
  if (name == "sequential") return Strategy::sequential;
  if (name == "multi_optimizer") return Strategy::multi_optimizer;
  if (name == "multitask_loss") return Strategy::multitask_loss;
  throw TensorError("unknown strategy '" + name + "'");
}

void Hyperparameters::validate() const {
  if (learning_rate <= 0.0) throw TensorError("learning_rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw TensorError("momentum must be in [0,1)");
  if (l2 < 0.0) throw TensorError("l2 must be >= 0");
  if (batch_size < 1) throw TensorError("batch_size must be >= 1");
  if (epochs < 1) throw TensorError("epochs must be >= 1");
  if (lambda_cls < 0.0 || lambda_depth < 0.0) throw TensorError("loss weights must be >= 0");
}

SGDState SGDState::for_params(const std::vector<Tensor>& params) {
  SGDState s;
  s.velocity.reserve(params.size());
  for (const Tensor& p : params) s.velocity.emplace_back(p.numel(), 0.0);
  return s;
}

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, SGDState& state,
              const Hyperparameters& hp) {
  if (params.size() != grads.size() || params.size() != state.velocity.size()) {
    throw TensorError("sgd_step: group size mismatch");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = params[k];
    const Tensor& g = grads[k];
    if (w.shape() != g.shape()) {
      throw TensorError("sgd_step: grad shape " + shape_str(g.shape()) +
                        " does not match param " + shape_str(w.shape()));
    }
    std::vector<double>& v = state.velocity[k];
    std::vector<double>& wd = w.mutable_data();
    const std::size_t n = wd.size();
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = hp.momentum * v[i] + (g.at(i) + hp.l2 * wd[i]);
      wd[i] -= hp.learning_rate * v[i];
    }
  }
  ++state.step_count;
}

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

struct Batch {
  Tensor images;
  Tensor depths;
  std::vector<int> labels;
};

Batch make_batch(const std::vector<RgbdSample>& samples, const std::vector<int>& order,
                 std::size_t begin, std::size_t end) {
  const int B = static_cast<int>(end - begin);
  const int S = samples[0].image.dim(1);
  const std::size_t plane = static_cast<std::size_t>(S) * S;
  std::vector<double> imgs(static_cast<std::size_t>(B) * plane);
  std::vector<double> deps(static_cast<std::size_t>(B) * plane);
  Batch b;
  b.labels.reserve(static_cast<std::size_t>(B));
  for (std::size_t k = begin; k < end; ++k) {
    const RgbdSample& s = samples[static_cast<std::size_t>(order[k])];
    std::copy(s.image.data().begin(), s.image.data().end(), imgs.begin() + (k - begin) * plane);
    std::copy(s.depth.data().begin(), s.depth.data().end(), deps.begin() + (k - begin) * plane);
    b.labels.push_back(s.label);
  }
  b.images = Tensor({B, 1, S, S}, std::move(imgs));
  b.depths = Tensor({B, 1, S, S}, std::move(deps));
  return b;
}

long count_correct(const Tensor& logits, const std::vector<int>& labels) {
  const int B = logits.dim(0), C = logits.dim(1);
  long correct = 0;
  for (int b = 0; b < B; ++b) {
    const double* row = logits.data().data() + static_cast<std::size_t>(b) * C;
    int best = 0;
    for (int c = 1; c < C; ++c) {
      if (row[c] > row[best]) best = c;
    }
    if (best == labels[static_cast<std::size_t>(b)]) ++correct;
  }
  return correct;
}

std::vector<Tensor> collect_grads(Tape& tape, const std::vector<Tensor>& params) {
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const Tensor& p : params) grads.push_back(tape.grad(p));
  return grads;
}

std::vector<Tensor> merge_groups(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  std::vector<Tensor> m = a;
  m.insert(m.end(), b.begin(), b.end());
  return m;
}

}  // namespace

Metrics evaluate(const MultitaskNet& net, const std::vector<RgbdSample>& cohort,
                 const ClassWeights& weights, int eval_batch) {
  if (cohort.empty()) throw TensorError("evaluate: empty cohort");
  const std::size_t n = cohort.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  long correct = 0;
  double ce_sum = 0.0, sse = 0.0;
  std::size_t pixel_count = 0;
  for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(eval_batch)) {
    const std::size_t end = std::min(n, begin + static_cast<std::size_t>(eval_batch));
    Batch b = make_batch(cohort, order, begin, end);
    MultitaskNet::Output out = net.forward(b.images, nullptr, MultitaskNet::Head::both);
    correct += count_correct(out.logits, b.labels);
    ce_sum += weighted_cross_entropy(out.logits, b.labels, weights).scalar_value() *
              static_cast<double>(end - begin);
    const std::size_t m = out.depth.numel();
    for (std::size_t i = 0; i < m; ++i) {
      const double d = out.depth.at(i) - b.depths.at(i);
      sse += d * d;
    }
    pixel_count += m;
  }
  Metrics mt;
  mt.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  mt.cls_loss = ce_sum / static_cast<double>(n);
  mt.depth_loss = sse / static_cast<double>(pixel_count);
  mt.depth_rmse = std::sqrt(mt.depth_loss);
  return mt;
}

struct Trainer::Accum {
  double ce_sum = 0.0, mse_sum = 0.0;
  long ce_samples = 0, mse_samples = 0;
  long correct = 0;

  Metrics finalize() const {
    Metrics m;
    m.accuracy = ce_samples > 0 ? static_cast<double>(correct) / static_cast<double>(ce_samples) : kNan;
    m.cls_loss = ce_samples > 0 ? ce_sum / static_cast<double>(ce_samples) : kNan;
    m.depth_loss = mse_samples > 0 ? mse_sum / static_cast<double>(mse_samples) : kNan;
    m.depth_rmse = mse_samples > 0 ? std::sqrt(m.depth_loss) : kNan;
    return m;
  }
};

Trainer::Trainer(MultitaskNet& net, const Dataset& data, const Hyperparameters& hp)
    : net_(net), data_(data), hp_(hp) {
  hp_.validate();
  if (data_.train.empty()) throw TensorError("Trainer: empty training cohort");
  weights_ = compute_class_weights(label_histogram(data_.train, net_.config().num_classes));
  enc_cls_ = merge_groups(net_.encoder_params(), net_.cls_params());
  enc_dec_ = merge_groups(net_.encoder_params(), net_.decoder_params());
  all_ = net_.all_params();
  switch (hp_.strategy) {
    case Strategy::single_task:
      opt_b_ = SGDState::for_params(enc_cls_);
      break;
    case Strategy::sequential:
    case Strategy::multi_optimizer:
      opt_a_ = SGDState::for_params(enc_dec_);
      opt_b_ = SGDState::for_params(enc_cls_);
      break;
    case Strategy::multitask_loss:
      opt_all_ = SGDState::for_params(all_);
      break;
  }
  record_.hp = hp_;
  started_ = std::chrono::steady_clock::now();
}

int Trainer::total_epochs() const {
  return hp_.strategy == Strategy::sequential ? 2 * hp_.epochs : hp_.epochs;
}

int Trainer::current_phase() const {
  return hp_.strategy == Strategy::sequential && epoch_ >= hp_.epochs ? 1 : 0;
}

void Trainer::step_cls(const Tensor& images, const std::vector<int>& labels, SGDState& opt,
                       std::vector<Tensor>& group, Accum& acc) {
  Tape tape;
  MultitaskNet::Output out = net_.forward(images, &tape, MultitaskNet::Head::classification);
  Tensor ce = weighted_cross_entropy(out.logits, labels, weights_, &tape);
  tape.backward(ce);
  sgd_step(group, collect_grads(tape, group), opt, hp_);
  acc.ce_sum += ce.scalar_value() * static_cast<double>(labels.size());
  acc.ce_samples += static_cast<long>(labels.size());
  acc.correct += count_correct(out.logits, labels);
}

void Trainer::step_depth(const Tensor& images, const Tensor& depths, SGDState& opt,
                         std::vector<Tensor>& group, Accum& acc) {
  Tape tape;
  MultitaskNet::Output out = net_.forward(images, &tape, MultitaskNet::Head::depth);
  Tensor mse = mse_loss(out.depth, depths, &tape);
  tape.backward(mse);
  sgd_step(group, collect_grads(tape, group), opt, hp_);
  acc.mse_sum += mse.scalar_value() * static_cast<double>(images.dim(0));
  acc.mse_samples += images.dim(0);
}

void Trainer::step_joint(const Tensor& images, const Tensor& depths,
                         const std::vector<int>& labels, Accum& acc) {
  Tape tape;
  MultitaskNet::Output out = net_.forward(images, &tape, MultitaskNet::Head::both);
  Tensor ce = weighted_cross_entropy(out.logits, labels, weights_, &tape);
  Tensor mse = mse_loss(out.depth, depths, &tape);
  Tensor total = add(scale(ce, hp_.lambda_cls, &tape), scale(mse, hp_.lambda_depth, &tape), &tape);
  tape.backward(total);
  sgd_step(all_, collect_grads(tape, all_), opt_all_, hp_);
  acc.ce_sum += ce.scalar_value() * static_cast<double>(labels.size());
  acc.ce_samples += static_cast<long>(labels.size());
  acc.correct += count_correct(out.logits, labels);
  acc.mse_sum += mse.scalar_value() * static_cast<double>(images.dim(0));
  acc.mse_samples += images.dim(0);
}

void Trainer::run_epoch() {
  if (finished()) throw TensorError("run_epoch called on a finished trainer");
  const int phase = current_phase();
  const std::size_t n = data_.train.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(Rng::derive(hp_.seed, static_cast<std::uint64_t>(epoch_)));
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = shuffle.next_below(i + 1);
    std::swap(order[i], order[j]);
  }

  Accum acc;
  for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(hp_.batch_size)) {
    const std::size_t end = std::min(n, begin + static_cast<std::size_t>(hp_.batch_size));
    Batch b = make_batch(data_.train, order, begin, end);
    switch (hp_.strategy) {
      case Strategy::single_task:
        step_cls(b.images, b.labels, opt_b_, enc_cls_, acc);
        break;
      case Strategy::sequential:
        if (phase == 0) {
          step_depth(b.images, b.depths, opt_a_, enc_dec_, acc);
        } else {
          step_cls(b.images, b.labels, opt_b_, enc_cls_, acc);
        }
        break;
      case Strategy::multi_optimizer:
        step_depth(b.images, b.depths, opt_a_, enc_dec_, acc);
        step_cls(b.images, b.labels, opt_b_, enc_cls_, acc);
        break;
      case Strategy::multitask_loss:
        step_joint(b.images, b.depths, b.labels, acc);
        break;
    }
  }

  EpochRecord er;
  er.epoch = epoch_;
  er.phase = phase;
  er.train = acc.finalize();
  er.val = evaluate(net_, data_.val, weights_);
  er.test = evaluate(net_, data_.test, weights_);
  if (er.val.accuracy > record_.best_val_accuracy || record_.best_epoch < 0) {
    record_.best_val_accuracy = er.val.accuracy;
    record_.best_epoch = epoch_;
  }
  record_.epochs.push_back(er);
  ++epoch_;
}

RunRecord Trainer::finish() {
  if (!record_.epochs.empty()) record_.final_test = record_.epochs.back().test;
  record_.aborted = !finished();
  record_.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  return record_;
}

std::vector<Trainer::OptimizerRef> Trainer::optimizers() {
  switch (hp_.strategy) {
    case Strategy::single_task:
      return {{"optB", &enc_cls_, &opt_b_}};
    case Strategy::sequential:
    case Strategy::multi_optimizer:
      return {{"optA", &enc_dec_, &opt_a_}, {"optB", &enc_cls_, &opt_b_}};
    case Strategy::multitask_loss:
      return {{"optAll", &all_, &opt_all_}};
  }
  return {};
}

void Trainer::resume_at(int epochs_done) {
  if (epochs_done < 0 || epochs_done > total_epochs()) {
    throw TensorError("resume_at: epoch out of range");
  }
  epoch_ = epochs_done;
}

RunRecord train_run(MultitaskNet& net, const Dataset& data, const Hyperparameters& hp) {
  Trainer t(net, data, hp);
  while (!t.finished()) t.run_epoch();
  return t.finish();
}

}  // namespace mtlforge
