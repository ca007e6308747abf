#include "layercache/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "layercache/errors.hpp"

namespace layercache {

namespace {

const struct {
  layer_kind kind;
  const char* name;
} kind_names[] = {
    {layer_kind::dense, "dense"},
    {layer_kind::conv2d, "conv2d"},
    {layer_kind::relu, "relu"},
    {layer_kind::maxpool2d, "maxpool2d"},
    {layer_kind::flatten, "flatten"},
    {layer_kind::global_average_pool, "global-average-pool"},
    {layer_kind::softmax, "softmax"},
    {layer_kind::log_softmax, "log-softmax"},
    {layer_kind::batchnorm_frozen, "batchnorm-frozen"},
};

[[noreturn]] void shape_fail(const layer_spec& spec, const std::vector<std::size_t>& in_shape,
                             const std::string& expected) {
  throw shape_error(std::string(layer_kind_name(spec.kind)) + ": input shape " +
                    tensor::shape_str(in_shape) + " does not match expected " + expected);
}

std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

const char* layer_kind_name(layer_kind k) {
  for (const auto& e : kind_names) {
    if (e.kind == k) return e.name;
  }
  return "?";
}

layer_kind layer_kind_from_name(const std::string& name) {
  for (const auto& e : kind_names) {
    if (name == e.name) return e.kind;
  }
  throw parse_error("unknown layer kind '" + name + "'");
}

layer_spec layer_spec::dense(std::size_t in, std::size_t out) {
  layer_spec s;
  s.kind = layer_kind::dense;
  s.in_features = in;
  s.out_features = out;
  return s;
}

layer_spec layer_spec::conv2d(std::size_t cin, std::size_t cout, std::size_t k,
                              std::size_t stride, std::size_t padding) {
  layer_spec s;
  s.kind = layer_kind::conv2d;
  s.in_channels = cin;
  s.out_channels = cout;
  s.kernel = k;
  s.stride = stride;
  s.padding = padding;
  return s;
}

layer_spec layer_spec::relu() {
  layer_spec s;
  s.kind = layer_kind::relu;
  return s;
}

layer_spec layer_spec::maxpool2d(std::size_t k, std::size_t stride) {
  layer_spec s;
  s.kind = layer_kind::maxpool2d;
  s.kernel = k;
  s.stride = stride;
  return s;
}

layer_spec layer_spec::flatten() {
  layer_spec s;
  s.kind = layer_kind::flatten;
  return s;
}

layer_spec layer_spec::global_average_pool() {
  layer_spec s;
  s.kind = layer_kind::global_average_pool;
  return s;
}

layer_spec layer_spec::softmax() {
  layer_spec s;
  s.kind = layer_kind::softmax;
  return s;
}

layer_spec layer_spec::log_softmax() {
  layer_spec s;
  s.kind = layer_kind::log_softmax;
  return s;
}

layer_spec layer_spec::batchnorm_frozen(std::size_t features) {
  layer_spec s;
  s.kind = layer_kind::batchnorm_frozen;
  s.features = features;
  return s;
}

bool layer_has_params(layer_kind k) {
  return k == layer_kind::dense || k == layer_kind::conv2d ||
         k == layer_kind::batchnorm_frozen;
}

layer_params init_params(const layer_spec& spec, rng& gen) {
  layer_params p;
  switch (spec.kind) {
    case layer_kind::dense: {
      const float bound = std::sqrt(6.0f / static_cast<float>(spec.in_features));
      p.weight = tensor({spec.out_features, spec.in_features});
      for (auto& v : p.weight.values()) v = gen.uniform(-bound, bound);
      p.bias = tensor({spec.out_features});
      break;
    }
    case layer_kind::conv2d: {
      const std::size_t fan_in = spec.in_channels * spec.kernel * spec.kernel;
      const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
      p.weight = tensor({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel});
      for (auto& v : p.weight.values()) v = gen.uniform(-bound, bound);
      p.bias = tensor({spec.out_channels});
      break;
    }
    case layer_kind::batchnorm_frozen: {
      p.weight = tensor({spec.features}, std::vector<float>(spec.features, 1.0f));
      p.bias = tensor({spec.features});
      break;
    }
    default:
      break;
  }
  return p;
}

std::vector<std::size_t> output_shape(const layer_spec& spec,
                                      const std::vector<std::size_t>& in) {
  if (!spec.inference_active) return in;
  switch (spec.kind) {
    case layer_kind::dense:
      if (in.size() != 1 || in[0] != spec.in_features) {
        shape_fail(spec, in, "[" + std::to_string(spec.in_features) + "]");
      }
      return {spec.out_features};
    case layer_kind::conv2d: {
      if (in.size() != 3 || in[0] != spec.in_channels) {
        shape_fail(spec, in, "[" + std::to_string(spec.in_channels) + ", h, w]");
      }
      if (in[1] + 2 * spec.padding < spec.kernel || in[2] + 2 * spec.padding < spec.kernel) {
        shape_fail(spec, in, "spatial dims >= kernel " + std::to_string(spec.kernel));
      }
      return {spec.out_channels, conv_out_dim(in[1], spec.kernel, spec.stride, spec.padding),
              conv_out_dim(in[2], spec.kernel, spec.stride, spec.padding)};
    }
    case layer_kind::relu:
      return in;
    case layer_kind::maxpool2d: {
      if (in.size() != 3) shape_fail(spec, in, "[c, h, w]");
      if (in[1] < spec.kernel || in[2] < spec.kernel) {
        shape_fail(spec, in, "spatial dims >= kernel " + std::to_string(spec.kernel));
      }
      return {in[0], conv_out_dim(in[1], spec.kernel, spec.stride, 0),
              conv_out_dim(in[2], spec.kernel, spec.stride, 0)};
    }
    case layer_kind::flatten:
      return {tensor::product(in)};
    case layer_kind::global_average_pool:
      if (in.size() != 3) shape_fail(spec, in, "[c, h, w]");
      return {in[0]};
    case layer_kind::softmax:
    case layer_kind::log_softmax:
      if (in.size() != 1) shape_fail(spec, in, "[classes]");
      return in;
    case layer_kind::batchnorm_frozen:
      if (in.empty() || in[0] != spec.features) {
        shape_fail(spec, in, "[" + std::to_string(spec.features) + ", ...]");
      }
      return in;
  }
  throw error("unreachable layer kind");
}

std::uint64_t layer_flops(const layer_spec& spec, const std::vector<std::size_t>& in) {
  if (!spec.inference_active) return 0;
  const auto out = output_shape(spec, in);
  const std::uint64_t in_n = tensor::product(in);
  const std::uint64_t out_n = tensor::product(out);
  switch (spec.kind) {
    case layer_kind::dense:
      return 2ULL * spec.in_features * spec.out_features;
    case layer_kind::conv2d:
      return 2ULL * spec.kernel * spec.kernel * spec.in_channels * out_n;
    case layer_kind::relu:
      return out_n;
    case layer_kind::maxpool2d:
      return out_n * spec.kernel * spec.kernel;
    case layer_kind::flatten:
      return 0;
    case layer_kind::global_average_pool:
      return in_n + out_n;
    case layer_kind::softmax:
    case layer_kind::log_softmax:
      return 5ULL * out_n;
    case layer_kind::batchnorm_frozen:
      return 2ULL * out_n;
  }
  throw error("unreachable layer kind");
}

namespace {

tensor batched_out(const layer_spec& spec, const tensor& input) {
  auto per_sample = output_shape(spec, input.sample_shape());
  std::vector<std::size_t> shape{input.rows()};
  shape.insert(shape.end(), per_sample.begin(), per_sample.end());
  return tensor(std::move(shape));
}

void check_params(const layer_spec& spec, const layer_params& p) {
  switch (spec.kind) {
    case layer_kind::dense:
      if (p.weight.shape() != std::vector<std::size_t>{spec.out_features, spec.in_features} ||
          p.bias.shape() != std::vector<std::size_t>{spec.out_features}) {
        throw shape_error("dense: weight shape " + p.weight.shape_str() +
                          " does not match expected [" + std::to_string(spec.out_features) +
                          ", " + std::to_string(spec.in_features) + "]");
      }
      break;
    case layer_kind::conv2d:
      if (p.weight.shape() != std::vector<std::size_t>{spec.out_channels, spec.in_channels,
                                                       spec.kernel, spec.kernel} ||
          p.bias.shape() != std::vector<std::size_t>{spec.out_channels}) {
        throw shape_error("conv2d: weight shape " + p.weight.shape_str() +
                          " does not match spec");
      }
      break;
    case layer_kind::batchnorm_frozen:
      if (p.weight.shape() != std::vector<std::size_t>{spec.features} ||
          p.bias.shape() != std::vector<std::size_t>{spec.features}) {
        throw shape_error("batchnorm-frozen: param shape " + p.weight.shape_str() +
                          " does not match feature count " + std::to_string(spec.features));
      }
      break;
    default:
      break;
  }
}

}  // namespace

tensor forward(const layer_spec& spec, const layer_params& params, const tensor& input) {
  if (input.rank() < 1) throw shape_error("forward: input needs a batch dim");
  if (!spec.inference_active) return input;
  check_params(spec, params);
  const std::size_t n = input.rows();
  tensor out = batched_out(spec, input);

  switch (spec.kind) {
    case layer_kind::dense: {
      const std::size_t in_f = spec.in_features, out_f = spec.out_features;
      for (std::size_t r = 0; r < n; ++r) {
        const float* x = input.row(r);
        float* y = out.row(r);
        for (std::size_t o = 0; o < out_f; ++o) {
          const float* w = params.weight.row(o);
          float acc = params.bias[o];
          for (std::size_t i = 0; i < in_f; ++i) acc += w[i] * x[i];
          y[o] = acc;
        }
      }
      break;
    }
    case layer_kind::conv2d: {
      const auto in_s = input.sample_shape();
      const std::size_t cin = in_s[0], h = in_s[1], w = in_s[2];
      const auto out_s = out.sample_shape();
      const std::size_t cout = out_s[0], ho = out_s[1], wo = out_s[2];
      const std::size_t k = spec.kernel, st = spec.stride;
      const long pad = static_cast<long>(spec.padding);
      for (std::size_t r = 0; r < n; ++r) {
        const float* x = input.row(r);
        float* y = out.row(r);
        for (std::size_t oc = 0; oc < cout; ++oc) {
          const float* wt = params.weight.data() + oc * cin * k * k;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              float acc = params.bias[oc];
              for (std::size_t ic = 0; ic < cin; ++ic) {
                for (std::size_t ky = 0; ky < k; ++ky) {
                  const long iy = static_cast<long>(oy * st + ky) - pad;
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const long ix = static_cast<long>(ox * st + kx) - pad;
                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                    acc += wt[(ic * k + ky) * k + kx] *
                           x[(ic * h + static_cast<std::size_t>(iy)) * w +
                             static_cast<std::size_t>(ix)];
                  }
                }
              }
              y[(oc * ho + oy) * wo + ox] = acc;
            }
          }
        }
      }
      break;
    }
    case layer_kind::relu: {
      for (std::size_t i = 0; i < input.size(); ++i) {
        out[i] = input[i] > 0.0f ? input[i] : 0.0f;
      }
      break;
    }
    case layer_kind::maxpool2d: {
      const auto in_s = input.sample_shape();
      const std::size_t c = in_s[0], h = in_s[1], w = in_s[2];
      const auto out_s = out.sample_shape();
      const std::size_t ho = out_s[1], wo = out_s[2];
      const std::size_t k = spec.kernel, st = spec.stride;
      for (std::size_t r = 0; r < n; ++r) {
        const float* x = input.row(r);
        float* y = out.row(r);
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              float best = -std::numeric_limits<float>::infinity();
              for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                  best = std::max(best, x[(ch * h + oy * st + ky) * w + ox * st + kx]);
                }
              }
              y[(ch * ho + oy) * wo + ox] = best;
            }
          }
        }
      }
      break;
    }
    case layer_kind::flatten: {
      out.values() = input.values();
      break;
    }
    case layer_kind::global_average_pool: {
      const auto in_s = input.sample_shape();
      const std::size_t c = in_s[0], hw = in_s[1] * in_s[2];
      const float inv = 1.0f / static_cast<float>(hw);
      for (std::size_t r = 0; r < n; ++r) {
        const float* x = input.row(r);
        float* y = out.row(r);
        for (std::size_t ch = 0; ch < c; ++ch) {
          float acc = 0.0f;
          for (std::size_t i = 0; i < hw; ++i) acc += x[ch * hw + i];
          y[ch] = acc * inv;
        }
      }
      break;
    }
    case layer_kind::softmax: {
      const std::size_t kk = input.row_size();
      for (std::size_t r = 0; r < n; ++r) {
        const float* x = input.row(r);
        float* y = out.row(r);
        float mx = x[0];
        for (std::size_t i = 1; i < kk; ++i) mx = std::max(mx, x[i]);
        float sum = 0.0f;
        for (std::size_t i = 0; i < kk; ++i) {
          y[i] = std::exp(x[i] - mx);
          sum += y[i];
        }
        const float inv = 1.0f / sum;
        for (std::size_t i = 0; i < kk; ++i) y[i] *= inv;
      }
      break;
    }
    case layer_kind::log_softmax: {
      const std::size_t kk = input.row_size();
      for (std::size_t r = 0; r < n; ++r) {
        const float* x = input.row(r);
        float* y = out.row(r);
        float mx = x[0];
        for (std::size_t i = 1; i < kk; ++i) mx = std::max(mx, x[i]);
        float sum = 0.0f;
        for (std::size_t i = 0; i < kk; ++i) sum += std::exp(x[i] - mx);
        const float lse = mx + std::log(sum);
        for (std::size_t i = 0; i < kk; ++i) y[i] = x[i] - lse;
      }
      break;
    }
    case layer_kind::batchnorm_frozen: {
      const auto in_s = input.sample_shape();
      const std::size_t f = spec.features;
      const std::size_t inner = tensor::product(in_s) / f;
      for (std::size_t r = 0; r < n; ++r) {
        const float* x = input.row(r);
        float* y = out.row(r);
        for (std::size_t c = 0; c < f; ++c) {
          const float sc = params.weight[c], sh = params.bias[c];
          for (std::size_t i = 0; i < inner; ++i) {
            y[c * inner + i] = sc * x[c * inner + i] + sh;
          }
        }
      }
      break;
    }
  }
  return out;
}

layer_grads backward(const layer_spec& spec, const layer_params& params,
                     const tensor& input, const tensor& output, const tensor& dout) {
  if (dout.shape() != output.shape()) {
    throw shape_error(std::string(layer_kind_name(spec.kind)) + ": upstream grad shape " +
                      dout.shape_str() + " does not match output " + output.shape_str());
  }
  layer_grads g;
  g.dinput = tensor(input.shape());
  if (!spec.inference_active) {
    g.dinput.values() = dout.values();
    return g;
  }
  const std::size_t n = input.rows();

  switch (spec.kind) {
    case layer_kind::dense: {
      const std::size_t in_f = spec.in_features, out_f = spec.out_features;
      g.dparams.weight = tensor(params.weight.shape());
      g.dparams.bias = tensor(params.bias.shape());
      for (std::size_t r = 0; r < n; ++r) {
        const float* x = input.row(r);
        const float* dy = dout.row(r);
        float* dx = g.dinput.row(r);
        for (std::size_t o = 0; o < out_f; ++o) {
          const float d = dy[o];
          const float* w = params.weight.row(o);
          float* dw = g.dparams.weight.row(o);
          g.dparams.bias[o] += d;
          for (std::size_t i = 0; i < in_f; ++i) {
            dx[i] += d * w[i];
            dw[i] += d * x[i];
          }
        }
      }
      break;
    }
    case layer_kind::conv2d: {
      const auto in_s = input.sample_shape();
      const std::size_t cin = in_s[0], h = in_s[1], w = in_s[2];
      const auto out_s = output.sample_shape();
      const std::size_t cout = out_s[0], ho = out_s[1], wo = out_s[2];
      const std::size_t k = spec.kernel, st = spec.stride;
      const long pad = static_cast<long>(spec.padding);
      g.dparams.weight = tensor(params.weight.shape());
      g.dparams.bias = tensor(params.bias.shape());
      for (std::size_t r = 0; r < n; ++r) {
        const float* x = input.row(r);
        const float* dy = dout.row(r);
        float* dx = g.dinput.row(r);
        for (std::size_t oc = 0; oc < cout; ++oc) {
          const float* wt = params.weight.data() + oc * cin * k * k;
          float* dwt = g.dparams.weight.data() + oc * cin * k * k;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const float d = dy[(oc * ho + oy) * wo + ox];
              g.dparams.bias[oc] += d;
              for (std::size_t ic = 0; ic < cin; ++ic) {
                for (std::size_t ky = 0; ky < k; ++ky) {
                  const long iy = static_cast<long>(oy * st + ky) - pad;
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const long ix = static_cast<long>(ox * st + kx) - pad;
                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                    const std::size_t xi =
                        (ic * h + static_cast<std::size_t>(iy)) * w +
                        static_cast<std::size_t>(ix);
                    dwt[(ic * k + ky) * k + kx] += d * x[xi];
                    dx[xi] += d * wt[(ic * k + ky) * k + kx];
                  }
                }
              }
            }
          }
        }
      }
      break;
    }
    case layer_kind::relu: {
      for (std::size_t i = 0; i < input.size(); ++i) {
        g.dinput[i] = input[i] > 0.0f ? dout[i] : 0.0f;
      }
      break;
    }
    case layer_kind::maxpool2d: {
      const auto in_s = input.sample_shape();
      const std::size_t c = in_s[0], h = in_s[1], w = in_s[2];
      const auto out_s = output.sample_shape();
      const std::size_t ho = out_s[1], wo = out_s[2];
      const std::size_t k = spec.kernel, st = spec.stride;
      for (std::size_t r = 0; r < n; ++r) {
        const float* x = input.row(r);
        const float* dy = dout.row(r);
        float* dx = g.dinput.row(r);
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              // first max wins ties so routing is deterministic
              std::size_t best_i = (ch * h + oy * st) * w + ox * st;
              float best = x[best_i];
              for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const std::size_t xi = (ch * h + oy * st + ky) * w + ox * st + kx;
                  if (x[xi] > best) {
                    best = x[xi];
                    best_i = xi;
                  }
                }
              }
              dx[best_i] += dy[(ch * ho + oy) * wo + ox];
            }
          }
        }
      }
      break;
    }
    case layer_kind::flatten: {
      g.dinput.values() = dout.values();
      break;
    }
    case layer_kind::global_average_pool: {
      const auto in_s = input.sample_shape();
      const std::size_t c = in_s[0], hw = in_s[1] * in_s[2];
      const float inv = 1.0f / static_cast<float>(hw);
      for (std::size_t r = 0; r < n; ++r) {
        const float* dy = dout.row(r);
        float* dx = g.dinput.row(r);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const float d = dy[ch] * inv;
          for (std::size_t i = 0; i < hw; ++i) dx[ch * hw + i] = d;
        }
      }
      break;
    }
    case layer_kind::softmax: {
      const std::size_t kk = output.row_size();
      for (std::size_t r = 0; r < n; ++r) {
        const float* y = output.row(r);
        const float* dy = dout.row(r);
        float* dx = g.dinput.row(r);
        float dot = 0.0f;
        for (std::size_t i = 0; i < kk; ++i) dot += dy[i] * y[i];
        for (std::size_t i = 0; i < kk; ++i) dx[i] = y[i] * (dy[i] - dot);
      }
      break;
    }
    case layer_kind::log_softmax: {
      const std::size_t kk = output.row_size();
      for (std::size_t r = 0; r < n; ++r) {
        const float* y = output.row(r);
        const float* dy = dout.row(r);
        float* dx = g.dinput.row(r);
        float sum = 0.0f;
        for (std::size_t i = 0; i < kk; ++i) sum += dy[i];
        for (std::size_t i = 0; i < kk; ++i) dx[i] = dy[i] - std::exp(y[i]) * sum;
      }
      break;
    }
    case layer_kind::batchnorm_frozen: {
      const std::size_t f = spec.features;
      const std::size_t inner = tensor::product(input.sample_shape()) / f;
      g.dparams.weight = tensor(params.weight.shape());
      g.dparams.bias = tensor(params.bias.shape());
      for (std::size_t r = 0; r < n; ++r) {
        const float* x = input.row(r);
        const float* dy = dout.row(r);
        float* dx = g.dinput.row(r);
        for (std::size_t c = 0; c < f; ++c) {
          const float sc = params.weight[c];
          for (std::size_t i = 0; i < inner; ++i) {
            const float d = dy[c * inner + i];
            dx[c * inner + i] = sc * d;
            g.dparams.weight[c] += d * x[c * inner + i];
            g.dparams.bias[c] += d;
          }
        }
      }
      break;
    }
  }
  return g;
}

}  // namespace layercache
