#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "mtlforge/data.hpp"
#include "mtlforge/nn_ops.hpp"
#include "mtlforge/unet.hpp"

namespace mtlforge {

enum class Strategy { single_task, sequential, multi_optimizer, multitask_loss };

const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);

struct Hyperparameters {
  double learning_rate = 5e-5;
  double l2 = 0.001;
  double momentum = 0.9;
  int batch_size = 4;
  int epochs = 10;
  Strategy strategy = Strategy::multitask_loss;
  double lambda_cls = 1.0;
  double lambda_depth = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Velocity buffers parallel to one parameter group.
struct SGDState {
  std::vector<std::vector<double>> velocity;
  long step_count = 0;

  static SGDState for_params(const std::vector<Tensor>& params);
};

// v <- momentum*v + (g + l2*w); w <- w - lr*v
void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, SGDState& state,
              const Hyperparameters& hp);

struct Metrics {
  double accuracy = 0.0;
  double depth_rmse = 0.0;
  double cls_loss = 0.0;
  double depth_loss = 0.0;
};

struct EpochRecord {
  int epoch = 0;  // global epoch counter (sequential spans 2*epochs)
  int phase = 0;  // sequential: 0 = depth phase, 1 = classification phase
  Metrics train, val, test;
};

struct RunRecord {
  Hyperparameters hp;
  std::vector<EpochRecord> epochs;
  Metrics final_test;
  double best_val_accuracy = 0.0;
  int best_epoch = -1;
  double wall_seconds = 0.0;
  bool aborted = false;
};

Metrics evaluate(const MultitaskNet& net, const std::vector<RgbdSample>& cohort,
                 const ClassWeights& weights, int eval_batch = 32);

// One training run. Strategies touch exactly their declared parameter groups:
// single_task and the classification phase update encoder+cls, depth passes
// update encoder+decoder, multitask_loss updates everything through one
// optimizer. Epoch shuffling draws from derive(hp.seed, epoch), so a run
// resumed at an epoch boundary replays the uninterrupted schedule.
class Trainer {
 public:
  Trainer(MultitaskNet& net, const Dataset& data, const Hyperparameters& hp);

  int total_epochs() const;
  int epochs_done() const { return epoch_; }
  bool finished() const { return epoch_ >= total_epochs(); }
  int current_phase() const;

  void run_epoch();
  RunRecord finish();

  // Checkpoint plumbing: named optimizer states with their parameter groups.
  struct OptimizerRef {
    std::string name;
    const std::vector<Tensor>* params;
    SGDState* state;
  };
  std::vector<OptimizerRef> optimizers();
  void resume_at(int epochs_done);

  const MultitaskNet& net() const { return net_; }
  const ClassWeights& class_weights() const { return weights_; }

 private:
  struct Accum;
  void step_cls(const Tensor& images, const std::vector<int>& labels, SGDState& opt,
                std::vector<Tensor>& group, Accum& acc);
  void step_depth(const Tensor& images, const Tensor& depths, SGDState& opt,
                  std::vector<Tensor>& group, Accum& acc);
  void step_joint(const Tensor& images, const Tensor& depths, const std::vector<int>& labels,
                  Accum& acc);

  MultitaskNet& net_;
  const Dataset& data_;
  Hyperparameters hp_;
  ClassWeights weights_;
  std::vector<Tensor> enc_cls_, enc_dec_, all_;
  SGDState opt_a_, opt_b_, opt_all_;
  int epoch_ = 0;
  RunRecord record_;
  std::chrono::steady_clock::time_point started_;
};

RunRecord train_run(MultitaskNet& net, const Dataset& data, const Hyperparameters& hp);

}  // namespace mtlforge
