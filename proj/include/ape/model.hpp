#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ape/nn.hpp"
#include "ape/optim.hpp"
#include "ape/threading.hpp"
#include "ape/volume.hpp"

namespace ape {

struct ModelConfig {
    int stem_channels = 16;
    std::vector<int> encoder_channels{16, 32, 64};
    std::vector<int> decoder_channels{64, 32};
    int kernel = 3;
    int stem_stride = 4; // fixed by the architecture contract
    int upsample = 4;    // fixed by the architecture contract
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    static constexpr int out_channels = 3;

    void validate() const {
        if (stem_channels < 1) throw config_error("model: stem_channels must be >= 1");
        if (encoder_channels.empty()) throw config_error("model: encoder list empty");
        if (decoder_channels.size() + 1 != encoder_channels.size())
            throw config_error("model: decoder list must be one shorter than encoder list");
        for (int c : encoder_channels)
            if (c < 1) throw config_error("model: encoder channels must be >= 1");
        for (int c : decoder_channels)
            if (c < 1) throw config_error("model: decoder channels must be >= 1");
        if (kernel % 2 != 1) throw config_error("model: kernel must be odd");
        if (stem_stride != 4 || upsample != 4)
            throw config_error("model: stem stride and upsample factor are fixed at 4");
        if (bn_eps <= 0) throw config_error("model: bn_eps must be > 0");
        if (bn_momentum <= 0 || bn_momentum > 1)
            throw config_error("model: bn_momentum must be in (0, 1]");
    }

    /// Smallest accepted input dim: the total downsampling factor.
    int min_input_dim() const {
        return stem_stride * (1 << int(encoder_channels.size() - 1));
    }

    std::string canonical() const {
        std::string s = "stem=" + std::to_string(stem_channels) + ";enc=";
        for (std::size_t i = 0; i < encoder_channels.size(); ++i)
            s += (i ? "," : "") + std::to_string(encoder_channels[i]);
        s += ";dec=";
        for (std::size_t i = 0; i < decoder_channels.size(); ++i)
            s += (i ? "," : "") + std::to_string(decoder_channels[i]);
        char tail[128];
        std::snprintf(tail, sizeof(tail), ";k=%d;ss=%d;up=%d;eps=%.17g;mom=%.17g", kernel,
                      stem_stride, upsample, bn_eps, bn_momentum);
        return s + tail;
    }

    std::uint64_t hash() const { return fnv1a64(canonical()); }
};

/// All learnable state plus batch-norm running statistics.
template <typename T>
struct ModelState {
    ModelConfig cfg;
    ConvParam<T> stem;                  // 1 -> stem_channels, k = stride = stem_stride
    std::vector<ConvParam<T>> enc_down; // stage i>0: enc[i-1] -> enc[i], k3 s2 p1
    std::vector<ConvParam<T>> enc_conv; // stage i: -> enc[i], k3 s1 p1
    std::vector<ConvParam<T>> dec_conv; // stage j: (prev + skip) -> dec[j], k3 s1 p1
    ConvParam<T> proj;                  // 1x1x1 -> 3, no activation after
    std::vector<double> running_mean;
    std::vector<double> running_var;
    std::int64_t steps_seen = 0;

    void build(const ModelConfig& c, std::uint64_t seed) {
        c.validate();
        cfg = c;
        Rng rng(Rng::mix(seed, 0x6d6f64656cull));
        stem = ConvParam<T>(cfg.stem_channels, 1, cfg.stem_stride);
        stem.init(rng);
        const auto& enc = cfg.encoder_channels;
        enc_down.clear();
        enc_conv.clear();
        for (std::size_t i = 0; i < enc.size(); ++i) {
            if (i > 0) {
                enc_down.emplace_back(enc[i], enc[i - 1], cfg.kernel);
                enc_down.back().init(rng);
            }
            enc_conv.emplace_back(enc[i], i == 0 ? cfg.stem_channels : enc[i], cfg.kernel);
            enc_conv.back().init(rng);
        }
        dec_conv.clear();
        int prev = enc.back();
        for (std::size_t j = 0; j < cfg.decoder_channels.size(); ++j) {
            const int skip = enc[enc.size() - 2 - j];
            dec_conv.emplace_back(cfg.decoder_channels[j], prev + skip, cfg.kernel);
            dec_conv.back().init(rng);
            prev = cfg.decoder_channels[j];
        }
        proj = ConvParam<T>(ModelConfig::out_channels, prev, 1);
        proj.init(rng);
        running_mean.assign(ModelConfig::out_channels, 0.0);
        running_var.assign(ModelConfig::out_channels, 1.0);
        steps_seen = 0;
    }

    /// Parameter buffers in a fixed order; optimizer state and checkpoints
    /// both key off this order.
    std::vector<std::vector<T>*> parameters() {
        std::vector<std::vector<T>*> ps;
        auto add = [&ps](ConvParam<T>& c) {
            ps.push_back(&c.w);
            ps.push_back(&c.b);
        };
        add(stem);
        for (auto& c : enc_down) add(c);
        for (auto& c : enc_conv) add(c);
        for (auto& c : dec_conv) add(c);
        add(proj);
        return ps;
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        for (auto* p : parameters()) n += std::int64_t(p->size());
        return n;
    }
};

using Model = ModelState<float>;

namespace detail {

template <typename T>
struct PatchCache {
    ivec3 in_shape{0, 0, 0};
    Tensor<T> x0;                    // padded input
    Tensor<T> stem_pre;              // stem conv output, pre-activation
    std::vector<Tensor<T>> down_in;  // input of each downsampling conv
    std::vector<Tensor<T>> down_pre; // its pre-activation output
    std::vector<Tensor<T>> enc_in;   // input of each stage conv
    std::vector<Tensor<T>> enc_pre;  // its pre-activation output
    std::vector<Tensor<T>> dec_in;   // concatenated input of each decoder conv
    std::vector<ivec3> up_src_shape; // spatial shape fed into each decoder resize
    std::vector<Tensor<T>> dec_pre;  // decoder conv pre-activation
    Tensor<T> proj_in;
};

template <typename T>
void accumulate_into(Tensor<T>& dst, Tensor<T>&& src) {
    if (dst.size() == 0) {
        dst = std::move(src);
        return;
    }
    for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

/// Encoder/decoder trunk for one patch, up to the pre-normalization 3-channel
/// map at 1/stem_stride resolution.
template <typename T>
Tensor<T> trunk_forward(const ModelState<T>& m, const Tensor<T>& input, PatchCache<T>* cache) {
    const ModelConfig& cfg = m.cfg;
    const ivec3 in_shape = input.spatial();
    for (int a = 0; a < 3; ++a)
        if (in_shape[a] < cfg.min_input_dim())
            throw std::invalid_argument(
                "model: input spatial dims must be >= " + std::to_string(cfg.min_input_dim()) +
                " (total downsampling factor), got " + std::to_string(in_shape[0]) + "x" +
                std::to_string(in_shape[1]) + "x" + std::to_string(in_shape[2]));

    PatchCache<T> local;
    PatchCache<T>& cc = cache ? *cache : local;
    cc.in_shape = in_shape;
    cc.x0 = nn::pad_high_to_multiple(input, cfg.stem_stride);

    cc.stem_pre = nn::conv3d_forward(cc.x0, m.stem, cfg.stem_stride, 0);
    Tensor<T> cur = cc.stem_pre;
    nn::gelu_inplace(cur);

    const std::size_t E = cfg.encoder_channels.size();
    std::vector<Tensor<T>> stage_out(E);
    for (std::size_t i = 0; i < E; ++i) {
        if (i > 0) {
            cc.down_in.push_back(cur);
            cc.down_pre.push_back(nn::conv3d_forward(cur, m.enc_down[i - 1], 2, 1));
            cur = cc.down_pre.back();
            nn::gelu_inplace(cur);
        }
        cc.enc_in.push_back(cur);
        cc.enc_pre.push_back(nn::conv3d_forward(cur, m.enc_conv[i], 1, 1));
        cur = cc.enc_pre.back();
        nn::gelu_inplace(cur);
        stage_out[i] = cur;
    }

    for (std::size_t j = 0; j < cfg.decoder_channels.size(); ++j) {
        const Tensor<T>& skip = stage_out[E - 2 - j];
        cc.up_src_shape.push_back(cur.spatial());
        Tensor<T> up = trilinear_resize(cur, skip.spatial());
        cc.dec_in.push_back(nn::concat_channels(up, skip));
        cc.dec_pre.push_back(nn::conv3d_forward(cc.dec_in.back(), m.dec_conv[j], 1, 1));
        cur = cc.dec_pre.back();
        nn::gelu_inplace(cur);
    }

    cc.proj_in = cur;
    return nn::conv3d_forward(cur, m.proj, 1, 0);
}

template <typename T>
struct ParamGrads {
    std::vector<std::vector<T>> bufs; // aligned with ModelState::parameters()

    void init_like(ModelState<T>& m) {
        bufs.clear();
        for (auto* p : m.parameters()) bufs.emplace_back(p->size(), T(0));
    }

    void add(const ParamGrads& o) {
        for (std::size_t b = 0; b < bufs.size(); ++b)
            for (std::size_t i = 0; i < bufs[b].size(); ++i) bufs[b][i] += o.bufs[b][i];
    }

    std::vector<std::vector<T>*> views() {
        std::vector<std::vector<T>*> v;
        v.reserve(bufs.size());
        for (auto& b : bufs) v.push_back(&b);
        return v;
    }
};

/// Backward through the trunk for one patch; grad_z is the gradient at the
/// pre-normalization map. Parameter gradients accumulate into `grads`.
template <typename T>
void trunk_backward(const ModelState<T>& m, const PatchCache<T>& cc, Tensor<T> grad_z,
                    ParamGrads<T>& grads) {
    const ModelConfig& cfg = m.cfg;
    const std::size_t E = cfg.encoder_channels.size();
    const std::size_t D = cfg.decoder_channels.size();

    // parameter buffer slots in parameters() order
    const std::size_t stem_slot = 0;
    const std::size_t down_slot = stem_slot + 2;
    const std::size_t enc_slot = down_slot + 2 * (E - 1);
    const std::size_t dec_slot = enc_slot + 2 * E;
    const std::size_t proj_slot = dec_slot + 2 * D;

    auto take = [&grads](std::size_t s, const nn::ConvGrads<T>& g) {
        auto& gw = grads.bufs[s];
        auto& gb = grads.bufs[s + 1];
        for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += g.grad_w[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g.grad_b[i];
    };

    nn::ConvGrads<T> pg = nn::conv3d_backward(cc.proj_in, m.proj, 1, 0, grad_z);
    Tensor<T> cur_grad = std::move(pg.grad_x);
    take(proj_slot, pg);

    std::vector<Tensor<T>> gso(E); // gradient wrt each encoder stage's output

    for (std::size_t jr = 0; jr < D; ++jr) {
        const std::size_t j = D - 1 - jr;
        Tensor<T> gpre = nn::gelu_backward(cc.dec_pre[j], cur_grad);
        nn::ConvGrads<T> dg = nn::conv3d_backward(cc.dec_in[j], m.dec_conv[j], 1, 1, gpre);
        take(dec_slot + 2 * j, dg);
        const std::size_t skip_stage = E - 2 - j;
        const int skip_c = cfg.encoder_channels[skip_stage];
        Tensor<T> gup, gskip;
        nn::split_channels(dg.grad_x, gup, gskip, dg.grad_x.c - skip_c);
        accumulate_into(gso[skip_stage], std::move(gskip));
        cur_grad = trilinear_resize_backward(gup, cc.up_src_shape[j]);
    }
    accumulate_into(gso[E - 1], std::move(cur_grad));

    Tensor<T> carry; // gradient flowing into the previous stage's output
    for (std::size_t ir = 0; ir < E; ++ir) {
        const std::size_t i = E - 1 - ir;
        Tensor<T> g = std::move(gso[i]);
        if (carry.size() != 0) {
            for (std::size_t t = 0; t < g.v.size(); ++t) g.v[t] += carry.v[t];
            carry = Tensor<T>();
        }
        Tensor<T> gpre = nn::gelu_backward(cc.enc_pre[i], g);
        nn::ConvGrads<T> eg = nn::conv3d_backward(cc.enc_in[i], m.enc_conv[i], 1, 1, gpre);
        take(enc_slot + 2 * i, eg);

        if (i > 0) {
            Tensor<T> gdpre = nn::gelu_backward(cc.down_pre[i - 1], eg.grad_x);
            nn::ConvGrads<T> ddg =
                nn::conv3d_backward(cc.down_in[i - 1], m.enc_down[i - 1], 2, 1, gdpre);
            take(down_slot + 2 * (i - 1), ddg);
            carry = std::move(ddg.grad_x);
        } else {
            Tensor<T> gstem_pre = nn::gelu_backward(cc.stem_pre, eg.grad_x);
            nn::ConvGrads<T> sg =
                nn::conv3d_backward(cc.x0, m.stem, cfg.stem_stride, 0, gstem_pre);
            take(stem_slot, sg);
        }
    }
}

/// Upsample the normalized map back to the padded resolution and crop to the
/// original input shape.
template <typename T>
Tensor<T> head_forward(const Tensor<T>& y, const ivec3& in_shape, int factor) {
    ivec3 padded;
    for (int a = 0; a < 3; ++a) padded[a] = y.spatial()[a] * factor;
    Tensor<T> up = trilinear_resize(y, padded);
    if (padded == in_shape) return up;
    Tensor<T> out(up.c, in_shape[0], in_shape[1], in_shape[2]);
    for (int c = 0; c < up.c; ++c)
        for (int x = 0; x < in_shape[0]; ++x)
            for (int yy = 0; yy < in_shape[1]; ++yy) {
                const T* src = up.row(c, x, yy);
                T* dst = out.row(c, x, yy);
                for (int z = 0; z < in_shape[2]; ++z) dst[z] = src[z];
            }
    return out;
}

template <typename T>
Tensor<T> head_backward(const Tensor<T>& grad_out, const ivec3& pre_up_shape, int factor) {
    ivec3 padded;
    for (int a = 0; a < 3; ++a) padded[a] = pre_up_shape[a] * factor;
    Tensor<T> g(grad_out.c, padded[0], padded[1], padded[2]);
    for (int c = 0; c < grad_out.c; ++c)
        for (int x = 0; x < grad_out.h; ++x)
            for (int yy = 0; yy < grad_out.w; ++yy) {
                const T* src = grad_out.row(c, x, yy);
                T* dst = g.row(c, x, yy);
                for (int z = 0; z < grad_out.d; ++z) dst[z] = src[z];
            }
    return trilinear_resize_backward(g, pre_up_shape);
}

} // namespace detail

enum class ForwardMode { train, eval };

/// Everything the backward pass needs from a training forward.
template <typename T>
struct TrainForward {
    std::vector<Tensor<T>> out;    // per patch, (3, h, w, d) at input resolution
    std::vector<Tensor<T>> pre_up; // normalized pre-upsampling maps
    std::vector<detail::PatchCache<T>> caches;
    nn::BnStats<T> stats;
};

/// Joint forward over a batch: per-patch trunks, one shared batch
/// normalization over all patches' maps, then per-patch upsampling.
/// Train mode updates running statistics.
template <typename T>
TrainForward<T> forward_train(ModelState<T>& m, const std::vector<Tensor<T>>& patches,
                              int workers) {
    if (patches.size() < 2)
        throw std::invalid_argument("model: train-mode forward needs a batch of >= 2 patches");
    TrainForward<T> fw;
    const int B = int(patches.size());
    fw.caches.resize(std::size_t(B));
    fw.pre_up.resize(std::size_t(B));
    fw.out.resize(std::size_t(B));
    parallel_for(B, workers, [&](std::int64_t i) {
        fw.pre_up[std::size_t(i)] =
            detail::trunk_forward(m, patches[std::size_t(i)], &fw.caches[std::size_t(i)]);
    });

    std::vector<const Tensor<T>*> zs;
    for (const auto& z : fw.pre_up) zs.push_back(&z);
    fw.stats = nn::bn_compute_stats(zs);
    for (auto& z : fw.pre_up) nn::bn_apply(z, fw.stats.mean, fw.stats.var, m.cfg.bn_eps);

    const double mom = m.cfg.bn_momentum;
    const double n = double(fw.stats.count);
    const double unbias = n > 1.5 ? n / (n - 1.0) : 1.0;
    for (int c = 0; c < ModelConfig::out_channels; ++c) {
        m.running_mean[std::size_t(c)] += mom * (fw.stats.mean[std::size_t(c)] -
                                                 m.running_mean[std::size_t(c)]);
        m.running_var[std::size_t(c)] += mom * (fw.stats.var[std::size_t(c)] * unbias -
                                                m.running_var[std::size_t(c)]);
    }

    parallel_for(B, workers, [&](std::int64_t i) {
        fw.out[std::size_t(i)] = detail::head_forward(
            fw.pre_up[std::size_t(i)], fw.caches[std::size_t(i)].in_shape, m.cfg.upsample);
    });
    return fw;
}

/// Backward through the whole batch. grad_out is per-patch gradient at the
/// output resolution. Per-patch parameter gradients are reduced in patch
/// order, so the result is independent of worker count.
template <typename T>
detail::ParamGrads<T> backward_train(ModelState<T>& m, const TrainForward<T>& fw,
                                     const std::vector<Tensor<T>>& grad_out, int workers) {
    const int B = int(fw.pre_up.size());
    std::vector<Tensor<T>> gy(static_cast<std::size_t>(B));
    parallel_for(B, workers, [&](std::int64_t i) {
        gy[std::size_t(i)] = detail::head_backward(
            grad_out[std::size_t(i)], fw.pre_up[std::size_t(i)].spatial(), m.cfg.upsample);
    });

    std::vector<const Tensor<T>*> ys;
    std::vector<Tensor<T>*> gys;
    for (int i = 0; i < B; ++i) {
        ys.push_back(&fw.pre_up[std::size_t(i)]);
        gys.push_back(&gy[std::size_t(i)]);
    }
    nn::bn_backward(ys, gys, fw.stats, m.cfg.bn_eps);

    std::vector<detail::ParamGrads<T>> partial(static_cast<std::size_t>(B));
    parallel_for(B, workers, [&](std::int64_t i) {
        partial[std::size_t(i)].init_like(m);
        detail::trunk_backward(m, fw.caches[std::size_t(i)], std::move(gy[std::size_t(i)]),
                               partial[std::size_t(i)]);
    });
    detail::ParamGrads<T> total;
    total.init_like(m);
    for (int i = 0; i < B; ++i) total.add(partial[std::size_t(i)]);
    return total;
}

/// Eval-mode forward for one patch: running statistics, no state mutation.
template <typename T>
Tensor<T> forward_eval(const ModelState<T>& m, const Tensor<T>& patch) {
    Tensor<T> z = detail::trunk_forward<T>(m, patch, nullptr);
    nn::bn_apply(z, m.running_mean, m.running_var, m.cfg.bn_eps);
    ivec3 in_shape = patch.spatial();
    return detail::head_forward(z, in_shape, m.cfg.upsample);
}

/// Recompute running statistics from a set of patches (forward only).
/// Short runs can leave the momentum average stale; this replaces it with the
/// exact statistics over the given sample.
template <typename T>
void calibrate_running_stats(ModelState<T>& m, const std::vector<Tensor<T>>& patches,
                             int workers) {
    if (patches.empty()) throw std::invalid_argument("calibrate: need at least one patch");
    const int B = int(patches.size());
    std::vector<Tensor<T>> zs(static_cast<std::size_t>(B));
    parallel_for(B, workers, [&](std::int64_t i) {
        zs[std::size_t(i)] = detail::trunk_forward<T>(m, patches[std::size_t(i)], nullptr);
    });
    std::vector<const Tensor<T>*> zp;
    for (const auto& z : zs) zp.push_back(&z);
    const nn::BnStats<T> stats = nn::bn_compute_stats(zp);
    const double n = double(stats.count);
    const double unbias = n > 1.5 ? n / (n - 1.0) : 1.0;
    for (int c = 0; c < ModelConfig::out_channels; ++c) {
        m.running_mean[std::size_t(c)] = stats.mean[std::size_t(c)];
        m.running_var[std::size_t(c)] = stats.var[std::size_t(c)] * unbias;
    }
}

// ---- sliding-window whole-volume inference ----

enum class BlendMode { triangular, nearest };

struct EmbedConfig {
    ivec3 window{32, 32, 24};
    double overlap = 0.5; // fraction of the window reused between neighbors
    BlendMode blend = BlendMode::triangular;
    int workers = 0; // 0 = default_workers()
};

/// Window start offsets covering [0, n): stride-spaced, final window flush
/// with the boundary.
inline std::vector<int> tile_starts(int n, int window, int stride) {
    std::vector<int> starts;
    if (window >= n) return {0};
    for (int s = 0;; s += stride) {
        if (s + window >= n) {
            starts.push_back(n - window);
            break;
        }
        starts.push_back(s);
    }
    return starts;
}

template <typename T>
EmbeddingMap sliding_window_embed(const ModelState<T>& m, const Volume& v,
                                  const EmbedConfig& ec) {
    if (ec.overlap < 0.0 || ec.overlap >= 1.0)
        throw std::invalid_argument("embed: overlap must be in [0, 1)");
    for (int a = 0; a < 3; ++a)
        if (ec.window[a] < m.cfg.min_input_dim())
            throw std::invalid_argument("embed: window smaller than the model's minimum input");

    // volumes smaller than the window: replicate-pad up, embed, crop back
    ivec3 work_shape = v.shape;
    bool padded = false;
    for (int a = 0; a < 3; ++a)
        if (work_shape[a] < ec.window[a]) {
            work_shape[a] = ec.window[a];
            padded = true;
        }
    const Volume* src = &v;
    Volume padded_vol;
    if (padded) {
        padded_vol = Volume(work_shape, v.spacing, v.origin);
        for (int x = 0; x < work_shape[0]; ++x)
            for (int y = 0; y < work_shape[1]; ++y)
                for (int z = 0; z < work_shape[2]; ++z)
                    padded_vol.at(x, y, z) = v.at(std::min(x, v.shape[0] - 1),
                                                  std::min(y, v.shape[1] - 1),
                                                  std::min(z, v.shape[2] - 1));
        src = &padded_vol;
    }

    ivec3 stride;
    std::vector<int> starts[3];
    for (int a = 0; a < 3; ++a) {
        stride[a] = std::max(1, int(std::llround(ec.window[a] * (1.0 - ec.overlap))));
        starts[a] = tile_starts(work_shape[a], ec.window[a], stride[a]);
    }

    struct Placement {
        ivec3 start;
    };
    std::vector<Placement> places;
    for (int sx : starts[0])
        for (int sy : starts[1])
            for (int sz : starts[2]) places.push_back({ivec3{sx, sy, sz}});

    const int W = int(places.size());
    std::vector<Tensor<T>> outs(static_cast<std::size_t>(W));
    const int workers = ec.workers > 0 ? ec.workers : default_workers();
    parallel_for(W, workers, [&](std::int64_t i) {
        const ivec3 s = places[std::size_t(i)].start;
        Tensor<T> patch(1, ec.window[0], ec.window[1], ec.window[2]);
        for (int x = 0; x < ec.window[0]; ++x)
            for (int y = 0; y < ec.window[1]; ++y) {
                T* dst = patch.row(0, x, y);
                const std::int16_t* sp = &src->data[src->index(s[0] + x, s[1] + y, s[2])];
                for (int z = 0; z < ec.window[2]; ++z) dst[z] = T(sp[z]);
            }
        outs[std::size_t(i)] = forward_eval(m, patch);
    });

    const std::int64_t nvox = volume_of(work_shape);
    std::vector<double> acc(std::size_t(nvox) * 3, 0.0);
    std::vector<double> wsum(std::size_t(nvox), 0.0);
    std::vector<float> best(ec.blend == BlendMode::nearest ? std::size_t(nvox) : 0,
                            std::numeric_limits<float>::max());

    // per-axis triangular blend weights, strictly positive
    std::vector<double> tri[3];
    for (int a = 0; a < 3; ++a) {
        tri[a].resize(std::size_t(ec.window[a]));
        for (int i = 0; i < ec.window[a]; ++i)
            tri[a][std::size_t(i)] = double(std::min(i + 1, ec.window[a] - i));
    }

    auto flat = [&work_shape](int x, int y, int z) {
        return (std::size_t(x) * work_shape[1] + y) * work_shape[2] + z;
    };

    for (int i = 0; i < W; ++i) {
        const ivec3 s = places[std::size_t(i)].start;
        const Tensor<T>& e = outs[std::size_t(i)];
        for (int x = 0; x < ec.window[0]; ++x)
            for (int y = 0; y < ec.window[1]; ++y)
                for (int z = 0; z < ec.window[2]; ++z) {
                    const std::size_t f = flat(s[0] + x, s[1] + y, s[2] + z);
                    if (ec.blend == BlendMode::triangular) {
                        const double w = tri[0][std::size_t(x)] * tri[1][std::size_t(y)] *
                                         tri[2][std::size_t(z)];
                        wsum[f] += w;
                        for (int c = 0; c < 3; ++c)
                            acc[f * 3 + std::size_t(c)] += w * double(e.at(c, x, y, z));
                    } else {
                        // nearest-center assignment; ties keep the earlier window
                        const float dx = float(x) - float(ec.window[0] - 1) * 0.5f;
                        const float dy = float(y) - float(ec.window[1] - 1) * 0.5f;
                        const float dz = float(z) - float(ec.window[2] - 1) * 0.5f;
                        const float d2 = dx * dx + dy * dy + dz * dz;
                        if (d2 < best[f]) {
                            best[f] = d2;
                            wsum[f] = 1.0;
                            for (int c = 0; c < 3; ++c)
                                acc[f * 3 + std::size_t(c)] = double(e.at(c, x, y, z));
                        }
                    }
                }
    }

    EmbeddingMap out(v.shape,
                     fvec3{float(v.spacing[0]), float(v.spacing[1]), float(v.spacing[2])},
                     fvec3{float(v.origin[0]), float(v.origin[1]), float(v.origin[2])});
    for (int c = 0; c < 3; ++c)
        for (int x = 0; x < v.shape[0]; ++x)
            for (int y = 0; y < v.shape[1]; ++y)
                for (int z = 0; z < v.shape[2]; ++z) {
                    const std::size_t f = flat(x, y, z);
                    out.at(c, x, y, z) = float(acc[f * 3 + std::size_t(c)] / wsum[f]);
                }
    return out;
}

// ---- checkpoint I/O ----

namespace detail {

inline void ckpt_write_u64(std::ostream& os, std::uint64_t x) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(x >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t ckpt_read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= std::uint64_t(b[i]) << (8 * i);
    return x;
}

inline void ckpt_write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    ckpt_write_u64(os, bits);
}

inline double ckpt_read_f64(std::istream& is) {
    const std::uint64_t bits = ckpt_read_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void ckpt_write_f32v(std::ostream& os, const std::vector<float>& v) {
    ckpt_write_u64(os, v.size());
    for (float x : v) {
        std::uint32_t bits;
        std::memcpy(&bits, &x, 4);
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = (unsigned char)(bits >> (8 * i));
        os.write(reinterpret_cast<const char*>(b), 4);
    }
}

inline void ckpt_read_f32v(std::istream& is, std::vector<float>& v, const char* what) {
    const std::uint64_t n = ckpt_read_u64(is);
    if (n != v.size())
        throw io_error(io_error::kind::size_mismatch,
                       std::string("checkpoint: ") + what + " buffer size mismatch");
    std::vector<unsigned char> raw(n * 4);
    is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
    if (!is)
        throw io_error(io_error::kind::size_mismatch, "checkpoint: truncated parameter data");
    for (std::uint64_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= std::uint32_t(raw[i * 4 + b]) << (8 * b);
        float x;
        std::memcpy(&x, &bits, 4);
        v[std::size_t(i)] = x;
    }
}

/// Canonical config string -> ModelConfig (inverse of ModelConfig::canonical).
inline ModelConfig parse_canonical_config(const std::string& s) {
    ModelConfig cfg;
    cfg.encoder_channels.clear();
    cfg.decoder_channels.clear();
    std::size_t pos = 0;
    auto fail = [&s]() -> void {
        throw io_error(io_error::kind::malformed_header,
                       "checkpoint: bad config string '" + s + "'");
    };
    while (pos < s.size()) {
        const std::size_t eq = s.find('=', pos);
        if (eq == std::string::npos) fail();
        const std::string key = s.substr(pos, eq - pos);
        std::size_t end = s.find(';', eq);
        if (end == std::string::npos) end = s.size();
        const std::string val = s.substr(eq + 1, end - eq - 1);
        auto parse_list = [&fail](const std::string& t) {
            std::vector<int> out;
            std::size_t p = 0;
            while (p < t.size()) {
                std::size_t c = t.find(',', p);
                if (c == std::string::npos) c = t.size();
                try {
                    out.push_back(std::stoi(t.substr(p, c - p)));
                } catch (const std::exception&) {
                    fail();
                }
                p = c + 1;
            }
            return out;
        };
        try {
            if (key == "stem") cfg.stem_channels = std::stoi(val);
            else if (key == "enc") cfg.encoder_channels = parse_list(val);
            else if (key == "dec") cfg.decoder_channels = parse_list(val);
            else if (key == "k") cfg.kernel = std::stoi(val);
            else if (key == "ss") cfg.stem_stride = std::stoi(val);
            else if (key == "up") cfg.upsample = std::stoi(val);
            else if (key == "eps") cfg.bn_eps = std::stod(val);
            else if (key == "mom") cfg.bn_momentum = std::stod(val);
            else fail();
        } catch (const io_error&) {
            throw;
        } catch (const std::exception&) {
            fail();
        }
        pos = end + 1;
    }
    return cfg;
}

} // namespace detail

/// Versioned checkpoint: config (canonical string + hash), parameters,
/// running stats, step counter, and optionally the optimizer moments.
inline void save_checkpoint(const std::string& path, Model& m, const AdamW<float>* opt) {
    std::ofstream os(path + ".tmp", std::ios::binary);
    if (!os)
        throw io_error(io_error::kind::unwritable, "checkpoint: cannot write " + path);
    os.write("APEC", 4);
    const unsigned char version = 1;
    os.write(reinterpret_cast<const char*>(&version), 1);
    const std::string cfg_str = m.cfg.canonical();
    detail::ckpt_write_u64(os, m.cfg.hash());
    detail::ckpt_write_u64(os, cfg_str.size());
    os.write(cfg_str.data(), std::streamsize(cfg_str.size()));
    for (double x : m.running_mean) detail::ckpt_write_f64(os, x);
    for (double x : m.running_var) detail::ckpt_write_f64(os, x);
    detail::ckpt_write_u64(os, std::uint64_t(m.steps_seen));
    auto params = m.parameters();
    detail::ckpt_write_u64(os, params.size());
    for (auto* p : params) detail::ckpt_write_f32v(os, *p);
    const unsigned char has_opt = opt != nullptr ? 1 : 0;
    os.write(reinterpret_cast<const char*>(&has_opt), 1);
    if (opt != nullptr) {
        detail::ckpt_write_u64(os, std::uint64_t(opt->step_count));
        detail::ckpt_write_u64(os, opt->m.size());
        for (const auto& b : opt->m) detail::ckpt_write_f32v(os, b);
        for (const auto& b : opt->v) detail::ckpt_write_f32v(os, b);
    }
    os.close();
    if (!os)
        throw io_error(io_error::kind::unwritable, "checkpoint: write failed for " + path);
    std::remove(path.c_str());
    if (std::rename((path + ".tmp").c_str(), path.c_str()) != 0)
        throw io_error(io_error::kind::unwritable, "checkpoint: cannot rename into " + path);
}

/// Loads a checkpoint; the model is rebuilt from the stored config.
/// Returns true if optimizer state was present and loaded into `opt`.
inline bool load_checkpoint(const std::string& path, Model& m, AdamW<float>* opt) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw io_error(io_error::kind::missing_file, "checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "APEC")
        throw io_error(io_error::kind::malformed_header, "checkpoint: bad magic in " + path);
    unsigned char version = 0;
    is.read(reinterpret_cast<char*>(&version), 1);
    if (version != 1)
        throw io_error(io_error::kind::malformed_header,
                       "checkpoint: unsupported version " + std::to_string(int(version)));
    const std::uint64_t stored_hash = detail::ckpt_read_u64(is);
    const std::uint64_t cfg_len = detail::ckpt_read_u64(is);
    if (cfg_len > 4096)
        throw io_error(io_error::kind::malformed_header, "checkpoint: config string too long");
    std::string cfg_str(cfg_len, '\0');
    is.read(cfg_str.data(), std::streamsize(cfg_len));
    if (!is)
        throw io_error(io_error::kind::malformed_header, "checkpoint: truncated header");
    const ModelConfig cfg = detail::parse_canonical_config(cfg_str);
    if (cfg.hash() != stored_hash)
        throw io_error(io_error::kind::malformed_header,
                       "checkpoint: config hash mismatch (corrupt or incompatible file)");
    m.build(cfg, 0);
    for (double& x : m.running_mean) x = detail::ckpt_read_f64(is);
    for (double& x : m.running_var) x = detail::ckpt_read_f64(is);
    m.steps_seen = std::int64_t(detail::ckpt_read_u64(is));
    auto params = m.parameters();
    const std::uint64_t np = detail::ckpt_read_u64(is);
    if (np != params.size())
        throw io_error(io_error::kind::size_mismatch, "checkpoint: parameter list mismatch");
    for (auto* p : params) detail::ckpt_read_f32v(is, *p, "parameter");
    unsigned char has_opt = 0;
    is.read(reinterpret_cast<char*>(&has_opt), 1);
    if (!is)
        throw io_error(io_error::kind::size_mismatch, "checkpoint: truncated trailer");
    if (has_opt == 0) {
        if (opt != nullptr) opt->init(params);
        return false;
    }
    const std::int64_t opt_steps = std::int64_t(detail::ckpt_read_u64(is));
    const std::uint64_t nb = detail::ckpt_read_u64(is);
    if (opt == nullptr) return true; // caller does not want it; skip silently
    if (nb != params.size())
        throw io_error(io_error::kind::size_mismatch, "checkpoint: optimizer list mismatch");
    opt->init(params);
    opt->step_count = opt_steps;
    for (auto& b : opt->m) detail::ckpt_read_f32v(is, b, "optimizer.m");
    for (auto& b : opt->v) detail::ckpt_read_f32v(is, b, "optimizer.v");
    return true;
}

} // namespace ape
