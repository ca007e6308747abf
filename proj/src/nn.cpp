#include "layercache/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "layercache/errors.hpp"
#include "layercache/rng.hpp"

namespace layercache {

sequential sequential::create(std::vector<layer_spec> specs, std::uint32_t seed) {
  sequential s;
  s.layers = std::move(specs);
  rng gen(seed);
  s.params.reserve(s.layers.size());
  for (const auto& spec : s.layers) s.params.push_back(init_params(spec, gen));
  return s;
}

tensor sequential::forward(const tensor& input) const {
  tensor cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    cur = layercache::forward(layers[i], params[i], cur);
  }
  return cur;
}

bool sequential::has_prob_head() const {
  if (layers.empty()) return false;
  const auto k = layers.back().kind;
  return k == layer_kind::softmax || k == layer_kind::log_softmax;
}

tensor sequential::logits(const tensor& input) const {
  if (!has_prob_head()) {
    throw precondition_error("model does not end in softmax or log-softmax");
  }
  tensor cur = input;
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    cur = layercache::forward(layers[i], params[i], cur);
  }
  return cur;
}

std::vector<std::size_t> sequential::output_shape(const std::vector<std::size_t>& in) const {
  auto cur = in;
  for (const auto& spec : layers) cur = layercache::output_shape(spec, cur);
  return cur;
}

std::uint64_t sequential::flops(const std::vector<std::size_t>& in) const {
  auto cur = in;
  std::uint64_t total = 0;
  for (const auto& spec : layers) {
    total += layer_flops(spec, cur);
    cur = layercache::output_shape(spec, cur);
  }
  return total;
}

std::vector<float> sequential::flat_params() const {
  std::vector<float> flat;
  for (const auto& p : params) {
    flat.insert(flat.end(), p.weight.values().begin(), p.weight.values().end());
    flat.insert(flat.end(), p.bias.values().begin(), p.bias.values().end());
  }
  return flat;
}

void sequential::set_flat_params(const std::vector<float>& flat) {
  std::size_t off = 0;
  for (auto& p : params) {
    for (auto* t : {&p.weight, &p.bias}) {
      if (off + t->size() > flat.size()) {
        throw shape_error("flat param blob too short for model");
      }
      std::copy(flat.begin() + off, flat.begin() + off + t->size(), t->values().begin());
      off += t->size();
    }
  }
  if (off != flat.size()) {
    throw shape_error("flat param blob has " + std::to_string(flat.size()) +
                      " values, model expects " + std::to_string(off));
  }
}

kl_result kl_div_loss(const tensor& student_log_pd, const tensor& teacher_pd) {
  if (student_log_pd.shape() != teacher_pd.shape() || student_log_pd.rank() != 2) {
    throw shape_error("kl_div_loss: student " + student_log_pd.shape_str() +
                      " vs teacher " + teacher_pd.shape_str() +
                      " (want matching [n, classes])");
  }
  const std::size_t n = teacher_pd.rows();
  const std::size_t k = teacher_pd.row_size();
  if (n == 0) throw shape_error("kl_div_loss: empty batch");

  kl_result res;
  res.dlogits = tensor(student_log_pd.shape());
  const float inv_n = 1.0f / static_cast<float>(n);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const float* t = teacher_pd.row(r);
    const float* s = student_log_pd.row(r);
    float* dl = res.dlogits.row(r);
    double row_sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      if (!std::isfinite(t[i]) || t[i] < 0.0f) {
        throw parse_error("teacher pd row " + std::to_string(r) +
                          " has a negative or non-finite entry");
      }
      row_sum += t[i];
    }
    if (std::abs(row_sum - 1.0) > 1e-3) {
      throw parse_error("teacher pd row " + std::to_string(r) + " sums to " +
                        std::to_string(row_sum) + ", not 1");
    }
    for (std::size_t i = 0; i < k; ++i) {
      if (t[i] > 0.0f) {
        loss += static_cast<double>(t[i]) * (std::log(static_cast<double>(t[i])) - s[i]);
      }
      dl[i] = (std::exp(s[i]) - t[i]) * inv_n;
    }
  }
  res.loss = static_cast<float>(loss * inv_n);
  return res;
}

namespace {

tensor log_softmax_rows(const tensor& logits) {
  static const layer_spec head = layer_spec::log_softmax();
  return forward(head, {}, logits);
}

// optimizer state per param tensor
struct opt_state {
  std::vector<float> m;  // velocity / first moment
  std::vector<float> v;  // second moment (adam only)
};

void apply_update(const train_config& cfg, tensor& param, const tensor& grad,
                  opt_state& st, std::size_t step) {
  if (param.size() == 0) return;
  if (st.m.empty()) st.m.assign(param.size(), 0.0f);
  if (cfg.optimizer == optimizer_kind::sgd_momentum) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      st.m[i] = cfg.momentum * st.m[i] + grad[i];
      param[i] -= cfg.learning_rate * st.m[i];
    }
  } else {
    if (st.v.empty()) st.v.assign(param.size(), 0.0f);
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    const float bc1 = 1.0f - std::pow(b1, static_cast<float>(step));
    const float bc2 = 1.0f - std::pow(b2, static_cast<float>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
      st.m[i] = b1 * st.m[i] + (1.0f - b1) * grad[i];
      st.v[i] = b2 * st.v[i] + (1.0f - b2) * grad[i] * grad[i];
      const float mh = st.m[i] / bc1;
      const float vh = st.v[i] / bc2;
      param[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + eps);
    }
  }
}

}  // namespace

float eval_loss(const sequential& model, const distill_data& data, std::size_t batch_size) {
  const std::size_t n = data.inputs.rows();
  if (n == 0) throw precondition_error("eval_loss: empty dataset");
  double total = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    idx.resize(stop - start);
    for (std::size_t i = start; i < stop; ++i) idx[i - start] = i;
    const tensor in = data.inputs.select_rows(idx);
    const tensor tg = data.targets.select_rows(idx);
    const tensor lp = log_softmax_rows(model.logits(in));
    total += static_cast<double>(kl_div_loss(lp, tg).loss) * static_cast<double>(idx.size());
  }
  return static_cast<float>(total / static_cast<double>(n));
}

train_result train(sequential& model, const distill_data& train_set,
                   const distill_data& val_set, const train_config& cfg) {
  train_result res;
  if (cfg.max_epochs == 0) return res;
  if (!model.has_prob_head()) {
    throw precondition_error("train: model does not end in softmax or log-softmax");
  }
  if (train_set.inputs.rows() == 0 || val_set.inputs.rows() == 0) {
    throw precondition_error("train: train and validation sets must be non-empty");
  }
  if (cfg.batch_size == 0) throw precondition_error("train: batch_size must be positive");

  const std::size_t n = train_set.inputs.rows();
  const std::size_t head = model.layers.size() - 1;
  rng order(cfg.seed);
  std::vector<opt_state> wstate(head), bstate(head);
  std::size_t step = 0;

  std::vector<float> best_params = model.flat_params();
  float best_val = std::numeric_limits<float>::infinity();
  std::size_t since_best = 0;

  std::vector<std::size_t> perm;
  std::vector<std::size_t> batch_idx;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    perm = order.permutation(n);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      batch_idx.assign(perm.begin() + start, perm.begin() + stop);
      const tensor in = train_set.inputs.select_rows(batch_idx);
      const tensor tg = train_set.targets.select_rows(batch_idx);

      // forward through the body, keeping activations for backprop
      std::vector<tensor> acts;
      acts.reserve(head + 1);
      acts.push_back(in);
      for (std::size_t i = 0; i < head; ++i) {
        acts.push_back(forward(model.layers[i], model.params[i], acts.back()));
      }
      const tensor lp = log_softmax_rows(acts.back());
      kl_result kl = kl_div_loss(lp, tg);
      if (!std::isfinite(kl.loss)) {
        throw divergence_error("training diverged at epoch " + std::to_string(epoch) +
                               " (lr=" + std::to_string(cfg.learning_rate) + ")");
      }
      epoch_loss += static_cast<double>(kl.loss) * static_cast<double>(batch_idx.size());

      ++step;
      tensor dcur = std::move(kl.dlogits);
      for (std::size_t i = head; i-- > 0;) {
        layer_grads g = backward(model.layers[i], model.params[i], acts[i], acts[i + 1], dcur);
        if (g.dparams.weight.size() > 0) {
          apply_update(cfg, model.params[i].weight, g.dparams.weight, wstate[i], step);
          apply_update(cfg, model.params[i].bias, g.dparams.bias, bstate[i], step);
        }
        dcur = std::move(g.dinput);
      }
    }

    res.train_loss.push_back(static_cast<float>(epoch_loss / static_cast<double>(n)));
    const float vl = eval_loss(model, val_set, cfg.batch_size);
    if (!std::isfinite(vl)) {
      throw divergence_error("validation loss diverged at epoch " + std::to_string(epoch) +
                             " (lr=" + std::to_string(cfg.learning_rate) + ")");
    }
    res.val_loss.push_back(vl);
    res.epochs_run = epoch + 1;

    if (vl < best_val) {
      best_val = vl;
      res.best_epoch = epoch;
      best_params = model.flat_params();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }

  model.set_flat_params(best_params);
  res.best_val_loss = best_val;
  return res;
}

}  // namespace layercache
