#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "layercache/rng.hpp"
#include "layercache/tensor.hpp"

namespace layercache {

enum class layer_kind {
  dense,
  conv2d,
  relu,
  maxpool2d,
  flatten,
  global_average_pool,
  softmax,
  log_softmax,
  batchnorm_frozen,
};

const char* layer_kind_name(layer_kind k);
layer_kind layer_kind_from_name(const std::string& name);

// one layer; hyperparameters only, weights live in layer_params.
// inference_active=false marks train-time-only nodes (dropout and friends):
// they run as identity and cost zero flops.
struct layer_spec {
  layer_kind kind = layer_kind::relu;
  // dense
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  // conv2d (square kernels); kernel/stride also used by maxpool2d
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  // batchnorm_frozen: folded per-feature affine width
  std::size_t features = 0;
  bool inference_active = true;

  static layer_spec dense(std::size_t in, std::size_t out);
  static layer_spec conv2d(std::size_t cin, std::size_t cout, std::size_t k,
                           std::size_t stride = 1, std::size_t padding = 0);
  static layer_spec relu();
  static layer_spec maxpool2d(std::size_t k, std::size_t stride);
  static layer_spec flatten();
  static layer_spec global_average_pool();
  static layer_spec softmax();
  static layer_spec log_softmax();
  static layer_spec batchnorm_frozen(std::size_t features);
};

// weights for one layer; empty tensors when the kind has none.
// dense: weight [out, in], bias [out]
// conv2d: weight [cout, cin, k, k], bias [cout]
// batchnorm_frozen: weight = per-feature scale [f], bias = per-feature shift [f]
struct layer_params {
  tensor weight;
  tensor bias;
};

bool layer_has_params(layer_kind k);

// kaiming-uniform weight init (bound sqrt(6 / fan_in)), zero bias
layer_params init_params(const layer_spec& spec, rng& gen);

// per-sample output shape for a per-sample input shape; validates compatibility
std::vector<std::size_t> output_shape(const layer_spec& spec,
                                      const std::vector<std::size_t>& in_shape);

// batched forward: input shape [n, ...per-sample...]
tensor forward(const layer_spec& spec, const layer_params& params, const tensor& input);

struct layer_grads {
  tensor dinput;
  layer_params dparams;  // empty tensors for parameter-free layers
};

// reverse-mode gradients given the forward input/output and upstream dout
layer_grads backward(const layer_spec& spec, const layer_params& params,
                     const tensor& input, const tensor& output, const tensor& dout);

// per-sample flop cost under the fixed conventions (1 mac = 2 flops):
//   dense 2*in*out; conv2d 2*k^2*cin*cout*hout*wout; relu |out|;
//   maxpool |out|*k^2; flatten 0; gap |in|+|out|; softmax/log-softmax 5*|out|;
//   batchnorm_frozen 2*|out|; inactive layers 0
std::uint64_t layer_flops(const layer_spec& spec, const std::vector<std::size_t>& in_shape);

}  // namespace layercache
