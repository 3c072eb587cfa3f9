#pragma once

// The temporal U-Net. A shared-weight encoder runs over every date; a
// convolutional LSTM at each encoder level folds the per-date features into
// a temporal summary; the decoder upsamples from the deepest summary with
// skip concatenations from the symmetric level; a 1x1 head emits per-pixel
// class logits. The plain variant drops the recurrence and fuses dates by
// channel concatenation at the input.
//
// Checkpoint files: "CDNETCK1" magic, u64-LE header length, JSON header
// (net config, creation seed, tensor table, optional extras), then raw
// float32-LE tensor data. Parameter keys:
//   enc{l}.conv.w|b   enc{l}.bn.gamma|beta|running_mean|running_var
//   lstm{l}.wx|wh|b   (gate order along out-channels: input, forget,
//                      output, candidate; wx is input-to-state, wh
//                      state-to-state, 3x3, bias shared per gate stack)
//   dec{l}.conv.w|b   dec{l}.bn.gamma|beta|running_mean|running_var
//   head.w|b

#include <array>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdnet/ad.hpp"
#include "cdnet/common.hpp"
#include "cdnet/raster.hpp"
#include "cdnet/rng.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

enum class NetVariant { unet_lstm, unet_plain };

inline const char* variant_name(NetVariant v) {
  return v == NetVariant::unet_lstm ? "unet_lstm" : "unet_plain";
}

inline NetVariant variant_from_name(const std::string& s) {
  if (s == "unet_lstm") return NetVariant::unet_lstm;
  if (s == "unet_plain") return NetVariant::unet_plain;
  fail_config(cat("unknown net variant: ", s));
}

struct NetConfig {
  int in_channels = 4;  // bands per date
  int base_depth = 16;
  int levels = 5;
  int num_classes = 2;
  NetVariant variant = NetVariant::unet_lstm;
  int num_dates = 2;  // input fusion width for unet_plain; unet_lstm takes any T at run time

  int depth(int level) const { return base_depth << (level - 1); }
  int pool_factor() const { return 1 << (levels - 1); }
};

inline void validate_net_config(const NetConfig& c) {
  check(c.in_channels >= 1, ErrKind::config, "net config: in_channels < 1");
  check(c.base_depth >= 1, ErrKind::config, "net config: base_depth < 1");
  check(c.levels >= 2, ErrKind::config, "net config: levels < 2");
  check(c.num_classes >= 2, ErrKind::config, "net config: num_classes < 2");
  check(c.num_dates >= 2, ErrKind::config, "net config: num_dates < 2");
}

inline ordered_json net_config_to_json(const NetConfig& c) {
  return ordered_json{{"in_channels", c.in_channels}, {"base_depth", c.base_depth},
                      {"levels", c.levels},           {"num_classes", c.num_classes},
                      {"variant", variant_name(c.variant)}, {"num_dates", c.num_dates}};
}

inline NetConfig net_config_from_json(const ordered_json& j) {
  NetConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.base_depth = j.at("base_depth").get<int>();
  c.levels = j.at("levels").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.num_dates = j.at("num_dates").get<int>();
  validate_net_config(c);
  return c;
}

template <typename T>
struct ModelParamsT {
  std::map<std::string, TensorT<T>> tensors;

  TensorT<T>& at(const std::string& k) {
    auto it = tensors.find(k);
    check(it != tensors.end(), ErrKind::runtime, cat("missing parameter: ", k));
    return it->second;
  }
  const TensorT<T>& at(const std::string& k) const {
    auto it = tensors.find(k);
    check(it != tensors.end(), ErrKind::runtime, cat("missing parameter: ", k));
    return it->second;
  }

  size_t count() const {
    size_t n = 0;
    for (const auto& [k, t] : tensors) n += t.count();
    return n;
  }

  static bool is_learnable(const std::string& key) {
    return key.find("running_") == std::string::npos;
  }
};

using ModelParams = ModelParamsT<float>;

namespace detail {

template <typename T>
void kaiming_uniform(Rng& rng, TensorT<T>& w, int fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : w.v) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void add_conv_block(ModelParamsT<T>& p, Rng& rng, const std::string& prefix, int cin, int cout,
                    int k, bool with_bn) {
  TensorT<T> w({cout, cin, k, k});
  kaiming_uniform(rng, w, cin * k * k);
  p.tensors[prefix + ".conv.w"] = std::move(w);
  p.tensors[prefix + ".conv.b"] = TensorT<T>({cout});
  if (with_bn) {
    p.tensors[prefix + ".bn.gamma"] = TensorT<T>({cout}, T(1));
    p.tensors[prefix + ".bn.beta"] = TensorT<T>({cout});
    p.tensors[prefix + ".bn.running_mean"] = TensorT<T>({cout});
    p.tensors[prefix + ".bn.running_var"] = TensorT<T>({cout}, T(1));
  }
}

}  // namespace detail

// Seeded parameter construction. Tensors are drawn in a fixed architectural
// order (encoder, recurrent blocks, decoder, head) so the same seed always
// yields the same bytes.
template <typename T = float>
ModelParamsT<T> build_params(const NetConfig& cfg, uint64_t seed) {
  validate_net_config(cfg);
  Rng rng(derive_seed(seed, 0xce11));
  ModelParamsT<T> p;

  const int enc1_in =
      cfg.variant == NetVariant::unet_plain ? cfg.in_channels * cfg.num_dates : cfg.in_channels;
  for (int l = 1; l <= cfg.levels; ++l) {
    const int cin = l == 1 ? enc1_in : cfg.depth(l - 1);
    detail::add_conv_block(p, rng, cat("enc", l), cin, cfg.depth(l), 3, true);
  }
  if (cfg.variant == NetVariant::unet_lstm) {
    for (int l = 1; l <= cfg.levels; ++l) {
      const int d = cfg.depth(l);
      TensorT<T> wx({4 * d, d, 3, 3});
      detail::kaiming_uniform(rng, wx, d * 9);
      TensorT<T> wh({4 * d, d, 3, 3});
      detail::kaiming_uniform(rng, wh, d * 9);
      TensorT<T> b({4 * d});
      for (int i = d; i < 2 * d; ++i) b.v[static_cast<size_t>(i)] = T(1);  // forget gate opens
      p.tensors[cat("lstm", l, ".wx")] = std::move(wx);
      p.tensors[cat("lstm", l, ".wh")] = std::move(wh);
      p.tensors[cat("lstm", l, ".b")] = std::move(b);
    }
  }
  for (int l = cfg.levels - 1; l >= 1; --l) {
    detail::add_conv_block(p, rng, cat("dec", l), cfg.depth(l) + cfg.depth(l + 1), cfg.depth(l), 3,
                           true);
  }
  {
    TensorT<T> w({cfg.num_classes, cfg.depth(1), 1, 1});
    detail::kaiming_uniform(rng, w, cfg.depth(1));
    p.tensors["head.w"] = std::move(w);
    p.tensors["head.b"] = TensorT<T>({cfg.num_classes});
  }
  return p;
}

enum class NetMode {
  train,         // batch statistics, running stats updated
  train_frozen,  // batch statistics, running stats untouched (pure function)
  eval,          // running statistics
};

struct ForwardTrace {
  // per encoder level: (depth, height, width) of the per-date feature map
  std::vector<std::array<int, 3>> encoder_shapes;
};

namespace detail {

template <typename T>
struct GraphParams {
  std::map<std::string, int> ref;
  int operator()(const std::string& k) const {
    auto it = ref.find(k);
    check(it != ref.end(), ErrKind::runtime, cat("missing parameter node: ", k));
    return it->second;
  }
};

template <typename T>
GraphParams<T> register_params(ad::Graph<T>& g, const ModelParamsT<T>& p) {
  GraphParams<T> out;
  for (const auto& [k, t] : p.tensors) {
    if (!ModelParamsT<T>::is_learnable(k)) continue;
    out.ref[k] = g.add_input(t, /*requires_grad=*/true);
  }
  return out;
}

template <typename T>
int conv_bn_relu(ad::Graph<T>& g, const GraphParams<T>& P, ModelParamsT<T>& params,
                 const std::string& prefix, int x, NetMode mode) {
  int y = g.conv2d(x, P(prefix + ".conv.w"), P(prefix + ".conv.b"), 1);
  y = g.batchnorm(y, P(prefix + ".bn.gamma"), P(prefix + ".bn.beta"),
                  &params.at(prefix + ".bn.running_mean"), &params.at(prefix + ".bn.running_var"),
                  mode != NetMode::eval, mode == NetMode::train, T(0.1), T(1e-5));
  return g.relu(y);
}

// One ConvLSTM step on graph nodes: x and state are (N, D, h, w).
template <typename T>
std::pair<int, int> lstm_step(ad::Graph<T>& g, int wx, int wh, int b, int x, int h, int c, int d) {
  const int pad = g.val(wx).dim(2) / 2;
  int gates = g.add(g.conv2d(x, wx, b, pad), g.conv2d(h, wh, -1, pad));
  int gi = g.sigmoid(g.slice_channels(gates, 0, d));
  int gf = g.sigmoid(g.slice_channels(gates, d, 2 * d));
  int go = g.sigmoid(g.slice_channels(gates, 2 * d, 3 * d));
  int gg = g.tanh_op(g.slice_channels(gates, 3 * d, 4 * d));
  int c_next = g.add(g.hadamard(gf, c), g.hadamard(gi, gg));
  int h_next = g.hadamard(go, g.tanh_op(c_next));
  return {h_next, c_next};
}

// Builds the full network graph and returns the logits node (N, K, H, W).
// `input` must be (B, T, C, H, W) flattened row-major.
template <typename T>
int build_net_graph(ad::Graph<T>& g, const NetConfig& cfg, ModelParamsT<T>& params,
                    const TensorT<T>& input, NetMode mode, ForwardTrace* trace = nullptr,
                    std::map<std::string, int>* param_refs = nullptr) {
  validate_net_config(cfg);
  check(input.rank() == 5, ErrKind::runtime, "net input must be (B,T,C,H,W)");
  const int B = input.dim(0), Td = input.dim(1), C = input.dim(2), H = input.dim(3),
            W = input.dim(4);
  check(C == cfg.in_channels, ErrKind::runtime, "net input channel mismatch");
  check(Td >= 2, ErrKind::runtime, "net input needs at least two dates");
  const int pf = cfg.pool_factor();
  check(H % pf == 0 && W % pf == 0, ErrKind::runtime,
        cat("net input spatial dims must be divisible by ", pf));
  if (cfg.variant == NetVariant::unet_plain)
    check(Td == cfg.num_dates, ErrKind::runtime, "unet_plain built for a different date count");

  auto P = register_params(g, params);
  if (param_refs) *param_refs = P.ref;

  // Both variants reinterpret the same (B,T,C,H,W) buffer: the lstm encoder
  // treats dates as extra batch rows, the plain variant as extra channels.
  TensorT<T> x0 = input;
  x0.shape = cfg.variant == NetVariant::unet_lstm ? std::vector<int>{B * Td, C, H, W}
                                                  : std::vector<int>{B, Td * C, H, W};
  int x = g.add_input(std::move(x0), false);

  std::vector<int> skips(static_cast<size_t>(cfg.levels) + 1, -1);
  int f = x;
  for (int l = 1; l <= cfg.levels; ++l) {
    f = conv_bn_relu(g, P, params, cat("enc", l), f, mode);
    if (l > 1) f = g.maxpool2(f);
    skips[static_cast<size_t>(l)] = f;
    if (trace)
      trace->encoder_shapes.push_back({g.val(f).dim(1), g.val(f).dim(2), g.val(f).dim(3)});
  }

  if (cfg.variant == NetVariant::unet_lstm) {
    for (int l = 1; l <= cfg.levels; ++l) {
      const int d = cfg.depth(l);
      const int fl = skips[static_cast<size_t>(l)];
      const int hh = g.val(fl).dim(2), ww = g.val(fl).dim(3);
      int h = g.add_input(TensorT<T>({B, d, hh, ww}), false);
      int c = g.add_input(TensorT<T>({B, d, hh, ww}), false);
      const int wx = P(cat("lstm", l, ".wx")), wh = P(cat("lstm", l, ".wh")),
                b = P(cat("lstm", l, ".b"));
      for (int t = 0; t < Td; ++t) {
        int xt = g.time_slice(fl, B, Td, t);
        std::tie(h, c) = lstm_step(g, wx, wh, b, xt, h, c, d);
      }
      skips[static_cast<size_t>(l)] = h;  // temporal summary replaces the raw feature
    }
  }

  int d = skips[static_cast<size_t>(cfg.levels)];
  for (int l = cfg.levels - 1; l >= 1; --l) {
    int up = g.upsample2(d);
    int cc = g.concat_channels(up, skips[static_cast<size_t>(l)]);
    d = conv_bn_relu(g, P, params, cat("dec", l), cc, mode);
  }
  return g.conv2d(d, P("head.w"), P("head.b"), 0);
}

}  // namespace detail

// Single-sample forward: input (T, C, H, W) -> per-pixel class probabilities
// (num_classes, H, W).
template <typename T>
TensorT<T> forward(ModelParamsT<T>& params, const NetConfig& cfg, const TensorT<T>& input,
                   NetMode mode = NetMode::eval, ForwardTrace* trace = nullptr) {
  check(input.rank() == 4, ErrKind::runtime, "forward input must be (T,C,H,W)");
  TensorT<T> batch = input;
  batch.shape = {1, input.dim(0), input.dim(1), input.dim(2), input.dim(3)};
  ad::Graph<T> g(/*grad_enabled=*/false);
  int logits = detail::build_net_graph(g, cfg, params, batch, mode, trace);
  int probs = g.softmax_channels(logits);
  TensorT<T> out = g.val(probs);
  out.shape = {out.dim(1), out.dim(2), out.dim(3)};
  return out;
}

// Batched eval forward: input (B, T, C, H, W) -> probabilities (B, K, H, W).
template <typename T>
TensorT<T> forward_batch(ModelParamsT<T>& params, const NetConfig& cfg, const TensorT<T>& input,
                         NetMode mode = NetMode::eval) {
  ad::Graph<T> g(false);
  int logits = detail::build_net_graph(g, cfg, params, input, mode);
  return g.val(g.softmax_channels(logits));
}

// Scalar loss under the same math as loss_and_gradients; used for
// finite-difference probing, so it must not mutate anything.
template <typename T>
T batch_loss(ModelParamsT<T>& params, const NetConfig& cfg, const TensorT<T>& input,
             const std::vector<uint8_t>& labels, const std::array<T, 2>& class_weights,
             NetMode mode = NetMode::train_frozen) {
  ad::Graph<T> g(false);
  int logits = detail::build_net_graph(g, cfg, params, input, mode);
  std::vector<T> w(g.val(logits).dim(1), T(1));
  w[0] = class_weights[0];
  if (w.size() > 1) w[1] = class_weights[1];
  int loss = g.softmax_xent_weighted(logits, labels, std::move(w));
  return g.val(loss).v[0];
}

template <typename T>
struct LossAndGrads {
  T loss = T(0);
  std::map<std::string, TensorT<T>> grads;  // learnable keys only
};

// Weighted cross-entropy loss and reverse-mode gradients for a batch.
// input (B,T,C,H,W), labels (B*H*W) row-major per sample.
template <typename T>
LossAndGrads<T> loss_and_gradients(ModelParamsT<T>& params, const NetConfig& cfg,
                                   const TensorT<T>& input, const std::vector<uint8_t>& labels,
                                   const std::array<T, 2>& class_weights,
                                   NetMode mode = NetMode::train) {
  ad::Graph<T> g(true);
  std::map<std::string, int> refs;
  int logits = detail::build_net_graph(g, cfg, params, input, mode, nullptr, &refs);
  std::vector<T> w(g.val(logits).dim(1), T(1));
  w[0] = class_weights[0];
  if (w.size() > 1) w[1] = class_weights[1];
  int loss = g.softmax_xent_weighted(logits, labels, std::move(w));

  LossAndGrads<T> out;
  out.loss = g.val(loss).v[0];
  g.backward(loss);
  for (const auto& [name, ref] : refs) {
    out.grads[name] = g.has_grad(ref) ? g.grad(ref) : TensorT<T>(params.at(name).shape);
  }
  return out;
}

// ---------------------------------------------------------------------------
// ConvLSTM single-sample step (the public cell contract)

template <typename T>
struct ConvLSTMStateT {
  TensorT<T> h;  // (D, H, W)
  TensorT<T> c;  // (D, H, W)
};

using ConvLSTMState = ConvLSTMStateT<float>;

template <typename T>
struct ConvLSTMGatesT {
  TensorT<T> wx;  // (4D, D_in, k, k)
  TensorT<T> wh;  // (4D, D, k, k)
  TensorT<T> b;   // (4D)
};

using ConvLSTMGates = ConvLSTMGatesT<float>;

template <typename T>
ConvLSTMStateT<T> convlstm_step(const ConvLSTMGatesT<T>& gates, const TensorT<T>& x,
                                const ConvLSTMStateT<T>& state) {
  check(x.rank() == 3, ErrKind::runtime, "convlstm_step input must be (C,H,W)");
  check(gates.wx.dim(0) % 4 == 0, ErrKind::runtime, "gate stack not divisible by 4");
  const int d = gates.wx.dim(0) / 4;
  check(gates.wx.dim(1) == x.dim(0), ErrKind::runtime, "convlstm_step: input channel mismatch");
  check(state.h.shape == std::vector<int>({d, x.dim(1), x.dim(2)}) && state.h.shape == state.c.shape,
        ErrKind::runtime, "convlstm_step: state shape mismatch");

  ad::Graph<T> g(false);
  auto batched = [&](const TensorT<T>& t) {
    TensorT<T> b = t;
    b.shape = {1, t.dim(0), t.dim(1), t.dim(2)};
    return g.add_input(std::move(b), false);
  };
  int wx = g.add_input(gates.wx, false);
  int wh = g.add_input(gates.wh, false);
  int b = g.add_input(gates.b, false);
  auto [h, c] = detail::lstm_step(g, wx, wh, b, batched(x), batched(state.h), batched(state.c), d);

  ConvLSTMStateT<T> out;
  out.h = g.val(h);
  out.h.shape = {d, x.dim(1), x.dim(2)};
  out.c = g.val(c);
  out.c.shape = {d, x.dim(1), x.dim(2)};
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint archive

constexpr char kCheckpointMagic[9] = "CDNETCK1";

inline void save_checkpoint(const fs::path& path, const NetConfig& cfg, uint64_t seed,
                            const ModelParams& params, const ordered_json& extra = ordered_json::object()) {
  ordered_json header;
  header["format_version"] = 1;
  header["net_config"] = net_config_to_json(cfg);
  header["seed"] = seed;
  header["extra"] = extra;
  header["tensors"] = ordered_json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : params.tensors) {  // std::map: sorted, stable
    header["tensors"].push_back(
        {{"name", name}, {"shape", t.shape}, {"offset", offset}, {"count", t.count()}});
    offset += t.count() * 4;
  }
  std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_runtime(cat("cannot write checkpoint ", path.string()));
  out.write(kCheckpointMagic, 8);
  uint64_t hlen = htext.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
  out.write(lenbuf, 8);
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  std::vector<char> buf;
  for (const auto& [name, t] : params.tensors) {
    buf.resize(t.count() * 4);
    for (size_t i = 0; i < t.count(); ++i) {
      uint32_t bits;
      std::memcpy(&bits, &t.v[i], 4);
      buf[4 * i] = static_cast<char>(bits & 0xff);
      buf[4 * i + 1] = static_cast<char>((bits >> 8) & 0xff);
      buf[4 * i + 2] = static_cast<char>((bits >> 16) & 0xff);
      buf[4 * i + 3] = static_cast<char>((bits >> 24) & 0xff);
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  check(static_cast<bool>(out), ErrKind::runtime, cat("write failed for ", path.string()));
}

struct LoadedCheckpoint {
  NetConfig config;
  uint64_t seed = 0;
  ModelParams params;
  ordered_json extra;
};

inline LoadedCheckpoint load_checkpoint(const fs::path& path) {
  auto bytes = detail::read_file(path, "missing checkpoint");
  check(bytes.size() >= 16 && std::memcmp(bytes.data(), kCheckpointMagic, 8) == 0, ErrKind::input,
        cat("not a checkpoint file: ", path.string()));
  uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i)
    hlen |= static_cast<uint64_t>(static_cast<uint8_t>(bytes[8 + i])) << (8 * i);
  check(bytes.size() >= 16 + hlen, ErrKind::input, "checkpoint header truncated");

  LoadedCheckpoint out;
  ordered_json header;
  try {
    header = ordered_json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(hlen));
    out.config = net_config_from_json(header.at("net_config"));
    out.seed = header.at("seed").get<uint64_t>();
    out.extra = header.value("extra", ordered_json::object());
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail_input(cat("checkpoint header invalid: ", e.what()));
  }

  const size_t base = 16 + hlen;
  for (const auto& jt : header.at("tensors")) {
    std::string name = jt.at("name").get<std::string>();
    std::vector<int> shape = jt.at("shape").get<std::vector<int>>();
    uint64_t offset = jt.at("offset").get<uint64_t>();
    uint64_t count = jt.at("count").get<uint64_t>();
    TensorT<float> t(shape);
    check(t.count() == count, ErrKind::input, "checkpoint tensor shape/count mismatch");
    check(base + offset + count * 4 <= bytes.size(), ErrKind::input, "checkpoint data truncated");
    for (size_t i = 0; i < count; ++i) {
      const auto* p = reinterpret_cast<const uint8_t*>(bytes.data() + base + offset + 4 * i);
      uint32_t bits = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                      (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
      std::memcpy(&t.v[i], &bits, 4);
    }
    out.params.tensors[name] = std::move(t);
  }
  return out;
}

}  // namespace cdnet
