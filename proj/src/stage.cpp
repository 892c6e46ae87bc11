#include "keysem/stage.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>
#include <utility>

namespace keysem {

namespace {

constexpr double kLnEps = 1e-6;
constexpr double kGeluA = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluB = 0.044715;

void run_indexed(std::size_t n, std::size_t threads,
                 const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t t = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(t);
  // Exceptions thrown by workers are rethrown on the caller's thread (first
  // worker index wins) instead of terminating the process.
  std::vector<std::exception_ptr> errors(t);
  for (std::size_t w = 0; w < t; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += t) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.rows(); ++i)
    for (std::size_t j = 0; j < dst.cols(); ++j) dst(i, j) += src(i, j);
}

Matrix sum_of(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  add_into(out, b);
  return out;
}

// Fixed order shared by checkpointing and gradient accumulation.
void visit_layer(LayerParams& lp, const std::function<void(Matrix&)>& fn) {
  fn(lp.norm1.scale);
  fn(lp.norm1.shift);
  fn(lp.proj.w_qry);
  fn(lp.proj.w_key);
  fn(lp.proj.w_val);
  fn(lp.out_proj);
  fn(lp.norm2.scale);
  fn(lp.norm2.shift);
  fn(lp.ffn.w1);
  fn(lp.ffn.b1);
  fn(lp.ffn.w2);
  fn(lp.ffn.b2);
}

LayerParams layer_zeros_like(const LayerParams& lp) {
  LayerParams z = lp;
  visit_layer(z, [](Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = 0.0;
  });
  return z;
}

void layer_accumulate(LayerParams& dst, const LayerParams& src) {
  std::vector<Matrix*> d, s;
  visit_layer(dst, [&](Matrix& m) { d.push_back(&m); });
  visit_layer(const_cast<LayerParams&>(src), [&](Matrix& m) { s.push_back(&m); });
  for (std::size_t i = 0; i < d.size(); ++i) add_into(*d[i], *s[i]);
}

std::size_t stage_embed(const StageConfig& cfg, std::size_t channels) {
  return cfg.embed != 0 ? cfg.embed : channels;
}

}  // namespace

std::size_t sample_k(const KPolicy& policy, RngStream& rng) {
  if (policy.kind == KPolicy::Kind::kFixed) {
    if (policy.fixed_k == 0) throw std::invalid_argument("sample_k: fixed k is zero");
    return policy.fixed_k;
  }
  if (policy.choices.empty()) {
    throw std::invalid_argument("sample_k: empty k set");
  }
  return policy.choices[rng.uniform_index(policy.choices.size())];
}

double gelu(double x) {
  const double t = std::tanh(kGeluA * (x + kGeluB * x * x * x));
  return 0.5 * x * (1.0 + t);
}

double gelu_grad(double x) {
  const double inner = kGeluA * (x + kGeluB * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = kGeluA * (1.0 + 3.0 * kGeluB * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

Matrix layer_norm_forward(const Matrix& x, const NormParams& p, LayerNormTape* tape) {
  const std::size_t n = x.rows(), c = x.cols();
  if (p.scale.cols() != c || p.shift.cols() != c) {
    throw std::invalid_argument("layer_norm: params for " + std::to_string(p.scale.cols()) +
                                " channels applied to " + std::to_string(c));
  }
  Matrix out(n, c);
  if (tape) {
    tape->xhat = Matrix(n, c);
    tape->inv_std.assign(n, 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv_std = 1.0 / std::sqrt(var + kLnEps);
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (x(i, j) - mean) * inv_std;
      out(i, j) = xh * p.scale(0, j) + p.shift(0, j);
      if (tape) tape->xhat(i, j) = xh;
    }
    if (tape) tape->inv_std[i] = inv_std;
  }
  return out;
}

Matrix layer_norm(const Matrix& x, const NormParams& p) {
  return layer_norm_forward(x, p, nullptr);
}

Matrix layer_norm_backward(const Matrix& d_y, const NormParams& p,
                           const LayerNormTape& tape, NormParams& d_p) {
  const std::size_t n = d_y.rows(), c = d_y.cols();
  Matrix d_x(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double dxh = d_y(i, j) * p.scale(0, j);
      sum_dxhat += dxh;
      sum_dxhat_xhat += dxh * tape.xhat(i, j);
      d_p.scale(0, j) += d_y(i, j) * tape.xhat(i, j);
      d_p.shift(0, j) += d_y(i, j);
    }
    const double inv_c = 1.0 / static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j) {
      const double dxh = d_y(i, j) * p.scale(0, j);
      d_x(i, j) = tape.inv_std[i] *
                  (dxh - inv_c * sum_dxhat - tape.xhat(i, j) * inv_c * sum_dxhat_xhat);
    }
  }
  return d_x;
}

Matrix ffn_forward(const Matrix& x, const FfnParams& p, FfnTape* tape) {
  if (x.cols() != p.w1.rows()) {
    throw std::invalid_argument("ffn: input width " + std::to_string(x.cols()) +
                                " does not match w1 rows " + std::to_string(p.w1.rows()));
  }
  Matrix pre = matmul(x, p.w1);
  for (std::size_t i = 0; i < pre.rows(); ++i)
    for (std::size_t j = 0; j < pre.cols(); ++j) pre(i, j) += p.b1(0, j);
  Matrix act(pre.rows(), pre.cols());
  for (std::size_t i = 0; i < pre.rows(); ++i)
    for (std::size_t j = 0; j < pre.cols(); ++j) act(i, j) = gelu(pre(i, j));
  Matrix out = matmul(act, p.w2);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += p.b2(0, j);
  if (tape) {
    tape->input = x;
    tape->hidden_pre = std::move(pre);
    tape->hidden = std::move(act);
  }
  return out;
}

Matrix ffn(const Matrix& x, const FfnParams& p) { return ffn_forward(x, p, nullptr); }

Matrix ffn_backward(const Matrix& d_out, const FfnParams& p, const FfnTape& tape,
                    FfnParams& d_p) {
  for (std::size_t i = 0; i < d_out.rows(); ++i)
    for (std::size_t j = 0; j < d_out.cols(); ++j) d_p.b2(0, j) += d_out(i, j);
  add_into(d_p.w2, matmul_at(tape.hidden, d_out));
  Matrix d_hidden = matmul_bt(d_out, p.w2);
  for (std::size_t i = 0; i < d_hidden.rows(); ++i)
    for (std::size_t j = 0; j < d_hidden.cols(); ++j)
      d_hidden(i, j) *= gelu_grad(tape.hidden_pre(i, j));
  for (std::size_t i = 0; i < d_hidden.rows(); ++i)
    for (std::size_t j = 0; j < d_hidden.cols(); ++j) d_p.b1(0, j) += d_hidden(i, j);
  add_into(d_p.w1, matmul_at(tape.input, d_hidden));
  return matmul_bt(d_hidden, p.w1);
}

TokenSet transformer_layer(const TokenSet& tokens, const KeySemanticDictionary& dict,
                           const LayerParams& lp, AttVariant variant, LayerTape* tape) {
  const Matrix& x = tokens.tokens;
  Matrix n1 = layer_norm_forward(x, lp.norm1, tape ? &tape->ln1 : nullptr);
  TokenSet n1ts{tokens.n, tokens.channels, n1};
  Qkv qkv = linear_proj(n1ts, lp.proj);
  AttentionOutput att =
      variant == AttVariant::kGather
          ? semanir_att_gather(qkv.q, qkv.k, qkv.v, dict, lp.proj.heads)
          : semanir_att_mask(qkv.q, qkv.k, qkv.v, dict, lp.proj.heads);
  Matrix a = matmul(att.tokens, lp.out_proj);
  flops::add(static_cast<std::uint64_t>(att.tokens.rows()) * att.tokens.cols() *
             lp.out_proj.cols());
  Matrix x1 = sum_of(x, a);
  Matrix n2 = layer_norm_forward(x1, lp.norm2, tape ? &tape->ln2 : nullptr);
  Matrix f = ffn_forward(n2, lp.ffn, tape ? &tape->ffn : nullptr);
  Matrix x2 = sum_of(x1, f);
  if (tape) {
    tape->input = tokens;
    tape->norm1_tokens = std::move(n1ts);
    tape->qkv = std::move(qkv);
    tape->att_tokens = std::move(att.tokens);
    tape->x1 = std::move(x1);
  }
  return TokenSet{tokens.n, tokens.channels, std::move(x2)};
}

Matrix transformer_layer_backward(const Matrix& d_out, const LayerParams& lp,
                                  const KeySemanticDictionary& dict,
                                  const LayerTape& tape, LayerParams& d_lp) {
  Matrix d_x1 = d_out;
  Matrix d_n2 = ffn_backward(d_out, lp.ffn, tape.ffn, d_lp.ffn);
  add_into(d_x1, layer_norm_backward(d_n2, lp.norm2, tape.ln2, d_lp.norm2));

  Matrix d_att = matmul_bt(d_x1, lp.out_proj);
  add_into(d_lp.out_proj, matmul_at(tape.att_tokens, d_x1));
  AttentionGrads ag =
      attention_backward(tape.qkv.q, tape.qkv.k, tape.qkv.v, dict, lp.proj.heads, d_att);
  ProjGrads pg =
      linear_proj_backward(tape.norm1_tokens, lp.proj, ag.d_q, ag.d_k, ag.d_v);
  add_into(d_lp.proj.w_qry, pg.d_wqry);
  add_into(d_lp.proj.w_key, pg.d_wkey);
  add_into(d_lp.proj.w_val, pg.d_wval);

  Matrix d_x = d_x1;
  add_into(d_x, layer_norm_backward(pg.d_tokens, lp.norm1, tape.ln1, d_lp.norm1));
  return d_x;
}

FeatureMap transformer_stage(const FeatureMap& f, const StageConfig& cfg,
                             const std::vector<LayerParams>& layers,
                             const ConvParams& conv, RngStream& rng, AttVariant variant,
                             std::size_t threads, StageTape* tape,
                             const std::vector<KeySemanticDictionary>* dict_override) {
  if (cfg.n_layers != layers.size() || cfg.n_layers == 0) {
    throw std::invalid_argument("transformer_stage: layer count mismatch");
  }
  if (conv.c_in != f.channels || conv.c_out != f.channels) {
    throw std::invalid_argument("transformer_stage: conv must map C -> C");
  }
  const std::size_t tokens_per_window = cfg.window * cfg.window;
  const std::size_t k = sample_k(cfg.k_policy, rng);
  const std::size_t max_k = cfg.include_self ? tokens_per_window : tokens_per_window - 1;
  if (k > max_k) {
    throw std::invalid_argument("transformer_stage: k=" + std::to_string(k) +
                                " out of range for window " + std::to_string(cfg.window));
  }

  WindowSet ws = window_partition(f, cfg.window);
  // Dictionaries come from the raw stage-input tokens, once per stage.
  std::vector<KeySemanticDictionary> dicts =
      dict_override ? *dict_override : dictionary_for_stage(ws, k, cfg.include_self);
  if (dicts.size() != ws.windows.size()) {
    throw std::invalid_argument("transformer_stage: dictionary count mismatch");
  }

  WindowSet processed = ws;
  if (tape) {
    tape->input_windows = ws;
    tape->sampled_k = k;
    tape->dicts = dicts;
    tape->layer_tapes.assign(ws.windows.size(), {});
  }
  run_indexed(ws.windows.size(), threads, [&](std::size_t w) {
    TokenSet cur = ws.windows[w];
    std::vector<LayerTape>* wt = nullptr;
    if (tape) {
      tape->layer_tapes[w].resize(layers.size());
      wt = &tape->layer_tapes[w];
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      cur = transformer_layer(cur, dicts[w], layers[l], variant,
                              wt ? &(*wt)[l] : nullptr);
    }
    processed.windows[w] = std::move(cur);
  });

  FeatureMap merged = window_merge(processed, f.height, f.width);
  FeatureMap conv_out = conv3x3(merged, conv);
  if (tape) tape->merged = merged;

  FeatureMap out = f;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += conv_out.data[i];
  return out;
}

FeatureMap transformer_stage_backward(const FeatureMap& d_out, const StageConfig& cfg,
                                      const std::vector<LayerParams>& layers,
                                      const ConvParams& conv, const StageTape& tape,
                                      StageParams& d_params, std::size_t threads) {
  FeatureMap d_in = d_out;  // residual path

  FeatureMap d_merged = conv3x3_backward_input(d_out, conv);
  conv3x3_backward_params(tape.merged, d_out, d_params.conv);

  WindowSet d_windows = window_merge_backward(d_merged, tape.input_windows);

  // Per-window layer-parameter gradients are reduced in window-index order so
  // results are independent of the thread count.
  const std::size_t n_windows = d_windows.windows.size();
  std::vector<std::vector<LayerParams>> window_grads(n_windows);
  run_indexed(n_windows, threads, [&](std::size_t w) {
    std::vector<LayerParams> grads;
    grads.reserve(layers.size());
    for (const LayerParams& lp : layers) grads.push_back(layer_zeros_like(lp));
    Matrix d_tok = d_windows.windows[w].tokens;
    for (std::size_t l = layers.size(); l-- > 0;) {
      d_tok = transformer_layer_backward(d_tok, layers[l], tape.dicts[w],
                                         tape.layer_tapes[w][l], grads[l]);
    }
    d_windows.windows[w].tokens = std::move(d_tok);
    window_grads[w] = std::move(grads);
  });
  for (std::size_t w = 0; w < n_windows; ++w) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layer_accumulate(d_params.layers[l], window_grads[w][l]);
    }
  }

  FeatureMap d_from_tokens =
      window_partition_backward(d_windows, d_out.height, d_out.width);
  for (std::size_t i = 0; i < d_in.data.size(); ++i)
    d_in.data[i] += d_from_tokens.data[i];
  return d_in;
}

FeatureMap model_forward(const FeatureMap& img, const ModelParams& mp, RngStream& rng,
                         AttVariant variant, std::size_t threads, ModelTape* tape,
                         const std::vector<std::vector<KeySemanticDictionary>>*
                             dict_override) {
  if (dict_override && dict_override->size() != mp.stages.size()) {
    throw std::invalid_argument("model_forward: dictionary override count mismatch");
  }
  FeatureMap x = conv3x3(img, mp.extract_conv);
  if (tape) {
    tape->input = img;
    tape->extracted = x;
    tape->stages.resize(mp.stages.size());
    tape->stage_outputs.clear();
  }
  for (std::size_t s = 0; s < mp.stages.size(); ++s) {
    x = transformer_stage(x, mp.stages[s].config, mp.stages[s].layers,
                          mp.stages[s].conv, rng, variant, threads,
                          tape ? &tape->stages[s] : nullptr,
                          dict_override ? &(*dict_override)[s] : nullptr);
    if (tape) tape->stage_outputs.push_back(x);
  }
  if (tape) tape->reconstructed_input = x;
  FeatureMap r = conv3x3(x, mp.reconstruct_conv);
  FeatureMap out = img;
  if (out.data.size() != r.data.size()) {
    throw std::invalid_argument("model_forward: reconstructor channel mismatch");
  }
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += r.data[i];
  return out;
}

FeatureMap model_backward(const FeatureMap& d_out, const ModelParams& mp,
                          const ModelTape& tape, ModelParams& d_mp,
                          std::size_t threads) {
  FeatureMap d_img = d_out;  // global residual

  FeatureMap d_x = conv3x3_backward_input(d_out, mp.reconstruct_conv);
  conv3x3_backward_params(tape.reconstructed_input, d_out, d_mp.reconstruct_conv);

  for (std::size_t s = mp.stages.size(); s-- > 0;) {
    d_x = transformer_stage_backward(d_x, mp.stages[s].config, mp.stages[s].layers,
                                     mp.stages[s].conv, tape.stages[s], d_mp.stages[s],
                                     threads);
  }

  FeatureMap d_from_extract = conv3x3_backward_input(d_x, mp.extract_conv);
  conv3x3_backward_params(tape.input, d_x, d_mp.extract_conv);
  for (std::size_t i = 0; i < d_img.data.size(); ++i)
    d_img.data[i] += d_from_extract.data[i];
  return d_img;
}

double train_step(ModelParams& mp, const FeatureMap& noisy, const FeatureMap& clean,
                  double lr, RngStream& rng, std::size_t threads) {
  if (noisy.data.size() != clean.data.size()) {
    throw std::invalid_argument("train_step: image shape mismatch");
  }
  ModelTape tape;
  FeatureMap pred = model_forward(noisy, mp, rng, AttVariant::kMask, threads, &tape);

  const double inv_count = 1.0 / static_cast<double>(pred.data.size());
  double loss = 0.0;
  FeatureMap d_pred(pred.height, pred.width, pred.channels);
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double diff = pred.data[i] - clean.data[i];
    loss += std::abs(diff) * inv_count;
    d_pred.data[i] = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) * inv_count;
  }
  if (!std::isfinite(loss)) {
    throw std::runtime_error("train_step: loss diverged (non-finite)");
  }

  ModelParams grads = zeros_like(mp);
  model_backward(d_pred, mp, tape, grads, threads);

  if (lr != 0.0) {
    std::vector<std::pair<double*, std::size_t>> prefs, grefs;
    visit_params(mp, [&](double* d, std::size_t c, std::uint32_t, std::uint32_t) {
      prefs.emplace_back(d, c);
    });
    visit_params(grads, [&](double* d, std::size_t c, std::uint32_t, std::uint32_t) {
      grefs.emplace_back(d, c);
    });
    for (std::size_t a = 0; a < prefs.size(); ++a) {
      for (std::size_t i = 0; i < prefs[a].second; ++i) {
        prefs[a].first[i] -= lr * grefs[a].first[i];
      }
    }
  }
  return loss;
}

void visit_layer_params(LayerParams& lp, const std::function<void(Matrix&)>& fn) {
  visit_layer(lp, fn);
}

namespace {
void visit_conv_params(ConvParams& c, const ParamVisitor& fn) {
  fn(c.kernel.data(), c.kernel.size(), static_cast<std::uint32_t>(9 * c.c_in),
     static_cast<std::uint32_t>(c.c_out));
  fn(c.bias.data(), c.bias.size(), 1, static_cast<std::uint32_t>(c.c_out));
}
}  // namespace

void visit_stage_params(StageParams& sp, const ParamVisitor& fn) {
  auto visit_matrix = [&](Matrix& m) {
    fn(m.data(), m.size(), static_cast<std::uint32_t>(m.rows()),
       static_cast<std::uint32_t>(m.cols()));
  };
  for (LayerParams& lp : sp.layers) visit_layer(lp, visit_matrix);
  visit_conv_params(sp.conv, fn);
}

void visit_params(ModelParams& mp, const ParamVisitor& fn) {
  visit_conv_params(mp.extract_conv, fn);
  for (StageParams& sp : mp.stages) visit_stage_params(sp, fn);
  visit_conv_params(mp.reconstruct_conv, fn);
}

std::size_t param_count(const ModelParams& mp) {
  std::size_t total = 0;
  visit_params(const_cast<ModelParams&>(mp),
               [&](double*, std::size_t c, std::uint32_t, std::uint32_t) { total += c; });
  return total;
}

std::vector<double> flatten_params(const ModelParams& mp) {
  std::vector<double> flat;
  flat.reserve(param_count(mp));
  visit_params(const_cast<ModelParams&>(mp),
               [&](double* d, std::size_t c, std::uint32_t, std::uint32_t) {
                 flat.insert(flat.end(), d, d + c);
               });
  return flat;
}

void unflatten_params(ModelParams& mp, const std::vector<double>& flat) {
  std::size_t pos = 0;
  visit_params(mp, [&](double* d, std::size_t c, std::uint32_t, std::uint32_t) {
    if (pos + c > flat.size()) throw std::invalid_argument("unflatten: too few values");
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
              flat.begin() + static_cast<std::ptrdiff_t>(pos + c), d);
    pos += c;
  });
  if (pos != flat.size()) throw std::invalid_argument("unflatten: too many values");
}

ModelParams zeros_like(const ModelParams& mp) {
  ModelParams z = mp;
  visit_params(z, [](double* d, std::size_t c, std::uint32_t, std::uint32_t) {
    std::fill(d, d + c, 0.0);
  });
  return z;
}

LayerParams make_layer(std::size_t channels, std::size_t embed, std::size_t heads,
                       std::size_t expansion, RngStream& rng) {
  const std::size_t d = embed != 0 ? embed : channels;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(channels));
  LayerParams lp;
  lp.norm1.scale = Matrix(1, channels);
  lp.norm1.shift = Matrix(1, channels);
  lp.norm2.scale = Matrix(1, channels);
  lp.norm2.shift = Matrix(1, channels);
  for (std::size_t j = 0; j < channels; ++j) {
    lp.norm1.scale(0, j) = 1.0;
    lp.norm2.scale(0, j) = 1.0;
  }
  auto randn = [&](std::size_t r, std::size_t c, double std) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) m(i, j) = rng.normal() * std;
    return m;
  };
  lp.proj.w_qry = randn(channels, d, proj_std);
  lp.proj.w_key = randn(channels, d, proj_std);
  lp.proj.w_val = randn(channels, d, proj_std);
  lp.proj.heads = heads;
  lp.out_proj = Matrix(d, channels);  // zero: residual branch starts silent
  lp.ffn.expansion = expansion;
  lp.ffn.w1 = randn(channels, expansion * channels, proj_std);
  lp.ffn.b1 = Matrix(1, expansion * channels);
  lp.ffn.w2 = Matrix(expansion * channels, channels);  // zero
  lp.ffn.b2 = Matrix(1, channels);
  return lp;
}

ModelParams make_model(std::size_t img_channels, std::size_t channels,
                       std::size_t n_stages, const StageConfig& stage_cfg,
                       RngStream& rng) {
  ModelParams mp;
  auto rand_conv = [&](std::size_t cin, std::size_t cout) {
    ConvParams c(cin, cout);
    const double std = 1.0 / std::sqrt(9.0 * static_cast<double>(cin));
    for (double& v : c.kernel) v = rng.normal() * std;
    return c;
  };
  mp.extract_conv = rand_conv(img_channels, channels);
  mp.stages.resize(n_stages);
  for (StageParams& sp : mp.stages) {
    sp.config = stage_cfg;
    for (std::size_t l = 0; l < stage_cfg.n_layers; ++l) {
      sp.layers.push_back(
          make_layer(channels, stage_cfg.embed, stage_cfg.heads, 4, rng));
    }
    sp.conv = rand_conv(channels, channels);
  }
  // Zero reconstructor: the freshly built model is the identity map.
  mp.reconstruct_conv = ConvParams(channels, img_channels);
  return mp;
}

namespace {
constexpr char kMagic[4] = {'K', 'S', 'E', 'M'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& mp) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  std::uint64_t count = 0;
  visit_params(const_cast<ModelParams&>(mp),
               [&](double*, std::size_t, std::uint32_t, std::uint32_t) { ++count; });
  write_pod(os, count);
  visit_params(const_cast<ModelParams&>(mp),
               [&](double* d, std::size_t c, std::uint32_t r, std::uint32_t cc) {
                 write_pod(os, r);
                 write_pod(os, cc);
                 os.write(reinterpret_cast<const char*>(d),
                          static_cast<std::streamsize>(c * sizeof(double)));
               });
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, ModelParams& mp) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kVersion) {
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(version));
  }
  std::uint64_t expected = 0;
  visit_params(mp, [&](double*, std::size_t, std::uint32_t, std::uint32_t) { ++expected; });
  const auto count = read_pod<std::uint64_t>(is);
  if (count != expected) {
    throw std::runtime_error("load_checkpoint: array count mismatch");
  }
  visit_params(mp, [&](double* d, std::size_t c, std::uint32_t r, std::uint32_t cc) {
    const auto fr = read_pod<std::uint32_t>(is);
    const auto fc = read_pod<std::uint32_t>(is);
    if (fr != r || fc != cc) {
      throw std::runtime_error("load_checkpoint: shape mismatch");
    }
    is.read(reinterpret_cast<char*>(d), static_cast<std::streamsize>(c * sizeof(double)));
  });
  if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
}

}  // namespace keysem
