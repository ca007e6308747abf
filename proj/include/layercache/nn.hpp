#pragma once

#include <cstdint>
#include <vector>

#include "layercache/layers.hpp"
#include "layercache/tensor.hpp"

namespace layercache {

// plain layer stack with aligned params
struct sequential {
  std::vector<layer_spec> layers;
  std::vector<layer_params> params;

  static sequential create(std::vector<layer_spec> specs, std::uint32_t seed);

  tensor forward(const tensor& input) const;
  // forward through everything but a trailing softmax / log-softmax
  tensor logits(const tensor& input) const;
  bool has_prob_head() const;

  std::vector<std::size_t> output_shape(const std::vector<std::size_t>& in) const;
  std::uint64_t flops(const std::vector<std::size_t>& in) const;  // per sample

  // flat little-endian f32 concatenation of all params, in layer order
  std::vector<float> flat_params() const;
  void set_flat_params(const std::vector<float>& flat);
};

// kl divergence between a teacher pd and student log-pd, batch-mean;
// grad is wrt the student logits feeding a log-softmax head
struct kl_result {
  float loss = 0.0f;
  tensor dlogits;
};

kl_result kl_div_loss(const tensor& student_log_pd, const tensor& teacher_pd);

enum class optimizer_kind { sgd_momentum, adam };

struct train_config {
  float learning_rate = 1e-3f;
  optimizer_kind optimizer = optimizer_kind::adam;
  float momentum = 0.9f;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 30;
  std::size_t patience = 5;
  std::uint32_t seed = 0;
};

// inputs [n, ...], targets are teacher pds [n, classes]
struct distill_data {
  tensor inputs;
  tensor targets;
};

struct train_result {
  std::vector<float> train_loss;  // per epoch, in order
  std::vector<float> val_loss;
  std::size_t best_epoch = 0;     // index into val_loss
  float best_val_loss = 0.0f;
  std::size_t epochs_run = 0;
};

// distills the model against the target pds; the model must end in a
// softmax or log-softmax head (loss works on the pre-head logits).
// keeps the best-val weights; throws divergence_error on non-finite loss.
train_result train(sequential& model, const distill_data& train_set,
                   const distill_data& val_set, const train_config& cfg);

// mean kl loss of the model on a dataset, no grad
float eval_loss(const sequential& model, const distill_data& data, std::size_t batch_size);

}  // namespace layercache
