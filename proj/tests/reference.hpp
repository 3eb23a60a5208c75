#pragma once

// Straight-line double-precision forward pass of the full model, written with
// the scalar oracles only. Parameters are read by name from a registry.

#include "oracles.hpp"
#include "simulflow/model.hpp"

namespace reference {

using oracle::Vec;
using simulflow::ModelConfig;
using simulflow::ParamRegistry;

struct Stage {
    Vec image, motion, coarse;  // tokens [N x C], coarse [h x w]
    std::size_t h = 0, w = 0;
};

struct Output {
    std::array<Stage, 4> stages;
    Vec logits;  // [2 x H x W]
};

class Model {
public:
    Model(const ParamRegistry& params, const ModelConfig& cfg) : p_(params), cfg_(cfg) {}

    Vec param(const std::string& name) const { return oracle::to_vec(p_.get(name)); }

    static Vec map_to_tokens(const Vec& map, std::size_t c, std::size_t n) {
        Vec t(n * c);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < n; ++i) t[i * c + ch] = map[ch * n + i];
        return t;
    }

    static Vec tokens_to_map(const Vec& t, std::size_t c, std::size_t n) {
        Vec map(n * c);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < n; ++i) map[ch * n + i] = t[i * c + ch];
        return map;
    }

    Vec lin(const Vec& x, const std::string& prefix, std::size_t n, std::size_t in, std::size_t out) const {
        return oracle::linear(x, param(prefix + ".weight"), param(prefix + ".bias"), n, in, out);
    }

    Vec ln(const Vec& x, const std::string& prefix, std::size_t n, std::size_t c) const {
        return oracle::layer_norm(x, param(prefix + ".weight"), param(prefix + ".bias"), n, c, 1e-6);
    }

    Vec conv_tokens(const Vec& map, const std::string& prefix, std::size_t cin, std::size_t h, std::size_t w,
                    std::size_t cout, std::size_t k, std::size_t& oh, std::size_t& ow) const {
        const Vec y = oracle::conv2d(map, param(prefix + ".weight"), param(prefix + ".bias"), cin, h, w, cout, k, k,
                                     0, oh, ow);
        return map_to_tokens(y, cout, oh * ow);
    }

    /// Single-head-group attention over explicit key / value rows, per head.
    static Vec attend(const Vec& q, const Vec& k, const Vec& v, std::size_t nq, std::size_t nk, std::size_t c,
                      std::size_t heads, const std::vector<double>* key_scale,
                      const std::vector<std::uint8_t>* keep) {
        const std::size_t d = c / heads;
        Vec out(nq * c, 0.0);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            for (std::size_t i = 0; i < nq; ++i) {
                Vec logit(nk);
                for (std::size_t j = 0; j < nk; ++j) {
                    double s = 0;
                    for (std::size_t e = 0; e < d; ++e) s += q[i * c + hd * d + e] * k[j * c + hd * d + e];
                    s /= std::sqrt(double(d));
                    if (key_scale) s *= (*key_scale)[j];
                    logit[j] = s;
                }
                double mx = -1e300;
                for (std::size_t j = 0; j < nk; ++j)
                    if (!keep || (*keep)[j]) mx = std::max(mx, logit[j]);
                double total = 0;
                Vec a(nk, 0.0);
                for (std::size_t j = 0; j < nk; ++j) {
                    if (keep && !(*keep)[j]) continue;
                    a[j] = std::exp(logit[j] - mx);
                    total += a[j];
                }
                for (std::size_t j = 0; j < nk; ++j) {
                    for (std::size_t e = 0; e < d; ++e) out[i * c + hd * d + e] += a[j] / total * v[j * c + hd * d + e];
                }
            }
        }
        return out;
    }

    /// Returns (image_out, motion_out) of one attention layer on normalised tokens.
    std::pair<Vec, Vec> attention(const Vec& xi, const Vec& xo, const Vec& coarse, std::size_t h, std::size_t w,
                                  std::size_t stage, const std::string& prefix) const {
        const std::size_t c = cfg_.channels[stage], heads = cfg_.heads[stage], sr = cfg_.sr_ratios[stage];
        const std::size_t n = h * w;
        auto kv_source = [&](const Vec& x, std::size_t& m) {
            if (sr == 1) {
                m = n;
                return x;
            }
            std::size_t oh, ow;
            const Vec t = conv_tokens(tokens_to_map(x, c, n), prefix + ".sr", c, h, w, c, sr, oh, ow);
            m = oh * ow;
            return ln(t, prefix + ".sr_norm", m, c);
        };
        std::size_t m = 0;
        const Vec si = kv_source(xi, m), so = kv_source(xo, m);
        const Vec qi = lin(xi, prefix + ".q", n, c, c), qo = lin(xo, prefix + ".q", n, c, c);
        const Vec ki = lin(si, prefix + ".k", m, c, c), ko = lin(so, prefix + ".k", m, c, c);
        const Vec vi = lin(si, prefix + ".v", m, c, c), vo = lin(so, prefix + ".v", m, c, c);

        const Vec motion = attend(qo, ko, vo, n, m, c, heads, nullptr, nullptr);

        const bool cross = cfg_.cross_enabled[stage];
        Vec keys = ki, values = vi;
        if (cross) {
            keys.insert(keys.end(), ko.begin(), ko.end());
            values.insert(values.end(), vo.begin(), vo.end());
        }
        const std::size_t nk = cross ? 2 * m : m;
        // coarse mask averaged over each sr x sr key cell
        std::vector<double> pooled(m);
        const std::size_t kw = w / sr;
        for (std::size_t j = 0; j < m; ++j) {
            const std::size_t ky = j / kw, kx = j % kw;
            double s = 0;
            for (std::size_t dy = 0; dy < sr; ++dy)
                for (std::size_t dx = 0; dx < sr; ++dx) s += coarse[(ky * sr + dy) * w + kx * sr + dx];
            pooled[j] = s / double(sr * sr);
        }
        std::vector<double> key_scale(nk);
        std::vector<std::uint8_t> keep(nk);
        bool any = false;
        for (std::size_t j = 0; j < nk; ++j) {
            key_scale[j] = oracle::sigmoid(pooled[j % m]);
            keep[j] = key_scale[j] >= 0.5;
            any = any || keep[j];
        }
        if (!any) std::fill(keep.begin(), keep.end(), 1);
        const bool masked = cfg_.mask_enabled[stage];
        const bool hard = cfg_.mask_mode == simulflow::MaskMode::hard;
        const Vec image = attend(qi, keys, values, n, nk, c, heads, masked && !hard ? &key_scale : nullptr,
                                 masked && hard ? &keep : nullptr);
        return {lin(image, prefix + ".proj", n, c, c), lin(motion, prefix + ".proj", n, c, c)};
    }

    Vec ffn(const Vec& x, const std::string& prefix, std::size_t n, std::size_t c) const {
        Vec hid = lin(x, prefix + ".fc1", n, c, c * cfg_.mlp_ratio);
        for (auto& v : hid) v = oracle::gelu(v);
        return lin(hid, prefix + ".fc2", n, c * cfg_.mlp_ratio, c);
    }

    Output forward(const simulflow::Tensor& image, const simulflow::Tensor& flow) const {
        Output out;
        Vec img_map = oracle::to_vec(image), mot_map = oracle::to_vec(flow);
        for (auto& v : img_map) v = (v - 0.5) / 0.5;
        for (auto& v : mot_map) v = (v - 0.5) / 0.5;
        std::size_t h = image.dim(1), w = image.dim(2), cin = 3;
        for (std::size_t s = 0; s < 4; ++s) {
            const std::string pre = "encoder.stage" + std::to_string(s + 1);
            const std::size_t c = cfg_.channels[s], patch = s == 0 ? 4 : 2;
            std::size_t oh, ow;
            Vec xi = conv_tokens(img_map, pre + ".patch_embed.proj", cin, h, w, c, patch, oh, ow);
            Vec xo = conv_tokens(mot_map, pre + ".patch_embed.proj", cin, h, w, c, patch, oh, ow);
            h = oh;
            w = ow;
            const std::size_t n = h * w;
            xi = ln(xi, pre + ".patch_embed.norm", n, c);
            xo = ln(xo, pre + ".patch_embed.norm", n, c);
            const Vec coarse = lin(xi, pre + ".mask_head", n, c, 1);
            for (std::size_t b = 0; b < cfg_.depths[s]; ++b) {
                const std::string bp = pre + ".block" + std::to_string(b);
                auto [ai, ao] = attention(ln(xi, bp + ".norm1", n, c), ln(xo, bp + ".norm1", n, c), coarse, h, w, s,
                                          bp + ".attn");
                for (std::size_t i = 0; i < xi.size(); ++i) {
                    xi[i] += ai[i];
                    xo[i] += ao[i];
                }
                const Vec fi = ffn(ln(xi, bp + ".norm2", n, c), bp + ".ffn", n, c);
                const Vec fo = ffn(ln(xo, bp + ".norm2", n, c), bp + ".ffn", n, c);
                for (std::size_t i = 0; i < xi.size(); ++i) {
                    xi[i] += fi[i];
                    xo[i] += fo[i];
                }
            }
            xi = ln(xi, pre + ".norm", n, c);
            xo = ln(xo, pre + ".norm", n, c);
            out.stages[s] = {xi, xo, coarse, h, w};
            img_map = tokens_to_map(xi, c, n);
            mot_map = tokens_to_map(xo, c, n);
            cin = c;
        }
        out.logits = decode(out);
        return out;
    }

    Vec decode(const Output& enc) const {
        const std::size_t qh = enc.stages[0].h, qw = enc.stages[0].w, nq = qh * qw, cd = cfg_.decoder_width;
        Vec stacked;  // [4C x qh x qw]
        for (std::size_t s = 0; s < 4; ++s) {
            const auto& st = enc.stages[s];
            const std::size_t n = st.h * st.w, c = cfg_.channels[s];
            Vec sum(st.image.size());
            for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = st.image[i] + st.motion[i];
            const Vec f = lin(sum, "decoder.linear_c" + std::to_string(s + 1), n, c, cd);
            const Vec up = oracle::bilinear(tokens_to_map(f, cd, n), cd, st.h, st.w, qh, qw);
            stacked.insert(stacked.end(), up.begin(), up.end());
        }
        const Vec fused = lin(map_to_tokens(stacked, 4 * cd, nq), "decoder.linear_fuse", nq, 4 * cd, cd);
        const Vec pred = lin(fused, "decoder.linear_pred", nq, cd, 2);
        return oracle::bilinear(tokens_to_map(pred, 2, nq), 2, qh, qw, 4 * qh, 4 * qw);
    }

private:
    const ParamRegistry& p_;
    ModelConfig cfg_;
};

} // namespace reference
