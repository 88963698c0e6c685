#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdlb/checkpoint.hpp"
#include "sdlb/graph.hpp"
#include "sdlb/rng.hpp"
#include "sdlb/tensor.hpp"

namespace sdlb {

inline constexpr std::uint64_t kWorldVersion = 1;

struct WorldConfig {
    std::uint64_t seed = 7;
    std::size_t tokens = 14;       // K
    std::size_t code_dim = 32;     // D
    std::size_t bits = 6;          // appearance bits
    std::size_t expr_classes = 5;  // E
    std::size_t z_dim = 8;
    std::size_t psi_dim = 8;
    std::size_t image = 32;  // H == W
    std::size_t blobs = 8;
    double code_noise = 0.05;
    double psi_jitter = 0.1;
    double az_range = 1.5707963267948966;   // [-pi/2, pi/2]
    double el_range = 0.5235987755982988;   // [-pi/6, pi/6]
    double front_prob = 0.1;

    void validate() const {
        if (tokens < 4) throw std::invalid_argument("world: tokens must be >= 4");
        if (bits * 4 + 4 > code_dim) {
            throw std::invalid_argument("world: code_dim too small for " + std::to_string(bits) +
                                        " bit blocks of width 4");
        }
        if (expr_classes < 2) throw std::invalid_argument("world: expr_classes must be >= 2");
        if (psi_dim < expr_classes) {
            throw std::invalid_argument("world: psi_dim must be >= expr_classes for prototypes");
        }
        if (blobs < bits) throw std::invalid_argument("world: need at least one blob per bit");
        if (image < 8) throw std::invalid_argument("world: image must be >= 8");
    }
};

struct CameraPose {
    double azimuth = 0.0;
    double elevation = 0.0;

    // [az, el, sin az, cos az, sin el, cos el]
    Tensor encode() const {
        return Tensor({6}, {azimuth, elevation, std::sin(azimuth), std::cos(azimuth),
                            std::sin(elevation), std::cos(elevation)});
    }
};

struct AttributeLabel {
    std::vector<int> bits;       // each 0/1
    std::size_t expr_class = 0;

    bool operator==(const AttributeLabel& o) const {
        return bits == o.bits && expr_class == o.expr_class;
    }
};

struct WorldImage {
    Tensor intensity;  // [H, W] in [0,1]
    Tensor depth;      // [H, W]
};

// ---- attribute text grammar ---------------------------------------------------

// Whitespace vocabulary over per-bit word families; each bit has an on-family
// and an off-family of two synonyms.
class Vocabulary {
public:
    explicit Vocabulary(std::size_t bits) : bits_(bits) {
        add_word("a");
        add_word("figure");
        static const char* builtin[6][2][2] = {
            {{"large", "broad"}, {"compact", "narrow"}},
            {{"ringed", "looped"}, {"plain", "bare"}},
            {{"marked", "dotted"}, {"clean", "smooth"}},
            {{"barred", "striped"}, {"open", "clear"}},
            {{"tilted", "slanted"}, {"level", "straight"}},
            {{"bright", "vivid"}, {"dim", "muted"}},
        };
        family_.resize(bits);
        for (std::size_t b = 0; b < bits; ++b) {
            for (int pol = 0; pol < 2; ++pol) {
                for (int syn = 0; syn < 2; ++syn) {
                    std::string w = (b < 6) ? builtin[b][pol][syn]
                                            : "attr" + std::to_string(b) + (pol ? "off" : "on") +
                                                  std::to_string(syn);
                    family_[b][pol][syn] = add_word(w);
                }
            }
        }
    }

    std::size_t size() const { return words_.size(); }
    const std::string& word(std::size_t id) const { return words_.at(id); }

    std::size_t id_of(const std::string& w) const {
        for (std::size_t i = 0; i < words_.size(); ++i) {
            if (words_[i] == w) return i;
        }
        throw std::invalid_argument("vocabulary: unknown word '" + w + "'");
    }

    // pol index 0 = bit set, 1 = bit clear.
    std::size_t family_word(std::size_t bit, int bit_value, int synonym) const {
        return family_.at(bit)[bit_value ? 0 : 1][synonym & 1];
    }

    bool in_family(std::size_t token, std::size_t bit, int bit_value) const {
        const auto& f = family_.at(bit)[bit_value ? 0 : 1];
        return token == f[0] || token == f[1];
    }

    // "a <w_0> ... <w_{A-1}> figure"
    std::vector<std::size_t> realize(const AttributeLabel& attrs, Rng& rng) const {
        std::vector<std::size_t> out;
        out.push_back(0);
        for (std::size_t b = 0; b < bits_; ++b) {
            out.push_back(family_word(b, attrs.bits[b], static_cast<int>(rng.below(2))));
        }
        out.push_back(1);
        return out;
    }

    // Synonym-0 realization; the deterministic form used by match scoring.
    std::vector<std::size_t> canonical(const AttributeLabel& attrs) const {
        std::vector<std::size_t> out;
        out.push_back(0);
        for (std::size_t b = 0; b < bits_; ++b) out.push_back(family_word(b, attrs.bits[b], 0));
        out.push_back(1);
        return out;
    }

    std::string to_text(const std::vector<std::size_t>& tokens) const {
        std::string s;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (i) s += ' ';
            s += word(tokens[i]);
        }
        return s;
    }

    std::vector<std::size_t> tokenize(const std::string& text) const {
        std::vector<std::size_t> out;
        std::string cur;
        for (char c : text + " ") {
            if (c == ' ') {
                if (!cur.empty()) out.push_back(id_of(cur));
                cur.clear();
            } else {
                cur += c;
            }
        }
        return out;
    }

private:
    std::size_t add_word(std::string w) {
        words_.push_back(std::move(w));
        return words_.size() - 1;
    }

    std::size_t bits_;
    std::vector<std::string> words_;
    std::vector<std::array<std::array<std::size_t, 2>, 2>> family_;
};

// ---- the frozen world -----------------------------------------------------------

// Deterministic differentiable stand-in for a pretrained generator. Everything
// is seeded once at construction and immutable afterwards: attribute layout,
// expression prototypes, the code->blob parameter maps, and the text grammar.
class SynthWorld {
public:
    explicit SynthWorld(WorldConfig cfg) : cfg_(cfg), vocab_(cfg.bits) {
        cfg_.validate();
        const std::size_t K = cfg_.tokens, D = cfg_.code_dim;
        const std::size_t kd = K * D;

        Rng rng = derive_rng(cfg_.seed, "world");

        // expression prototypes in code space (row 1) and psi space
        Rng rp = rng.fork(1);
        code_proto_ = Tensor::randn({cfg_.expr_classes, D}, rp);
        psi_proto_ = orthonormal_rows(cfg_.expr_classes, cfg_.psi_dim, rp);

        // z-feature affine maps for every non-reserved coordinate
        Rng rz = rng.fork(2);
        zmap_ = Tensor::randn({kd, cfg_.z_dim}, rz, 1.0 / std::sqrt(static_cast<double>(cfg_.z_dim)));
        zbias_ = Tensor::randn({kd}, rz, 0.3);

        // blob parameter maps: rows [cx, cy, amp, scale, depth] per blob
        Rng rb = rng.fork(3);
        blob_map_ = Tensor::zeros({cfg_.blobs * 5, kd});
        blob_base_ = Tensor::zeros({cfg_.blobs * 5});
        const std::size_t xw = x_block_width();
        for (std::size_t j = 0; j < cfg_.blobs; ++j) {
            fill_support(blob_map_, j * 5 + 0, x_block_start(), xw, 0.8, rb);           // cx
            fill_support(blob_map_, j * 5 + 1, y_block_start(), xw, 0.8, rb);           // cy
            blob_base_.data[j * 5 + 2] = (j < cfg_.bits) ? 0.9 : 0.55;                  // amp
            if (j < cfg_.bits) {
                // dedicated bit blob: amplitude keyed to the bit block mean
                for (std::size_t c = 0; c < 4; ++c) {
                    blob_map_.data[(j * 5 + 2) * kd + bit_block_start(j) + c] = 0.8 / 4.0;
                }
            } else {
                fill_general(blob_map_, j * 5 + 2, 0.35, rb);
            }
            blob_base_.data[j * 5 + 3] = 0.22;                                          // scale
            fill_general(blob_map_, j * 5 + 3, 0.06, rb);
            blob_base_.data[j * 5 + 4] = 0.55;                                          // depth
            fill_general(blob_map_, j * 5 + 4, 0.12, rb);
        }
    }

    const WorldConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    const Tensor& psi_prototypes() const { return psi_proto_; }
    const Tensor& code_prototypes() const { return code_proto_; }

    std::size_t code_size() const { return cfg_.tokens * cfg_.code_dim; }

    // ---- codes -------------------------------------------------------------

    // Canonical (front-view) code: bit blocks at +-1, expression prototype on
    // row 1, remaining coordinates smooth in z; small noise everywhere.
    Tensor sample_canonical_code(const Tensor& z, const AttributeLabel& attrs, Rng& rng) const {
        if (z.size() != cfg_.z_dim) {
            throw std::invalid_argument("sample_canonical_code: z length " +
                                        std::to_string(z.size()) + " != " +
                                        std::to_string(cfg_.z_dim));
        }
        check_attrs(attrs);
        const std::size_t K = cfg_.tokens, D = cfg_.code_dim;
        Tensor code({K, D});
        for (std::size_t i = 0; i < K * D; ++i) {
            double v = 0.0;
            for (std::size_t k = 0; k < cfg_.z_dim; ++k) {
                v += zmap_.data[i * cfg_.z_dim + k] * z.data[k];
            }
            code.data[i] = std::tanh(v + zbias_.data[i]);
        }
        for (std::size_t b = 0; b < cfg_.bits; ++b) {
            const double sign = attrs.bits[b] ? 1.0 : -1.0;
            for (std::size_t c = 0; c < 4; ++c) code.data[bit_block_start(b) + c] = sign;
        }
        for (std::size_t d = 0; d < D; ++d) {
            code.data[1 * D + d] = code_proto_.data[attrs.expr_class * D + d];
        }
        for (double& v : code.data) v += cfg_.code_noise * rng.normal();
        return code;
    }

    AttributeLabel decode_attributes(const Tensor& code) const {
        AttributeLabel out;
        std::vector<double> conf;
        decode_attributes(code, out, conf);
        return out;
    }

    // Thresholds the reserved blocks; expression by nearest prototype in
    // cosine similarity. Per-class confidence = max(0, cosine).
    void decode_attributes(const Tensor& code, AttributeLabel& out,
                           std::vector<double>& confidence) const {
        if (code.size() != code_size()) {
            throw std::invalid_argument("decode_attributes: code shape " + shape_str(code.shape));
        }
        out.bits.assign(cfg_.bits, 0);
        for (std::size_t b = 0; b < cfg_.bits; ++b) {
            double m = 0.0;
            for (std::size_t c = 0; c < 4; ++c) m += code.data[bit_block_start(b) + c];
            out.bits[b] = (m / 4.0 > 0.0) ? 1 : 0;
        }
        const std::size_t D = cfg_.code_dim;
        confidence.assign(cfg_.expr_classes, 0.0);
        double row_norm = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            row_norm += code.data[D + d] * code.data[D + d];
        }
        row_norm = std::sqrt(row_norm);
        std::size_t best = 0;
        double best_cos = -2.0;
        for (std::size_t cl = 0; cl < cfg_.expr_classes; ++cl) {
            double dot = 0.0, pn = 0.0;
            for (std::size_t d = 0; d < D; ++d) {
                dot += code.data[D + d] * code_proto_.data[cl * D + d];
                pn += code_proto_.data[cl * D + d] * code_proto_.data[cl * D + d];
            }
            const double denom = row_norm * std::sqrt(pn);
            const double cosv = denom > 0.0 ? dot / denom : 0.0;
            confidence[cl] = std::max(0.0, cosv);
            if (cosv > best_cos) {
                best_cos = cosv;
                best = cl;
            }
        }
        out.expr_class = best;
    }

    // Zeroes the x-position block; the result renders mirror-symmetric at
    // azimuth 0.
    Tensor symmetrize(Tensor code) const {
        const std::size_t xs = x_block_start();
        for (std::size_t c = 0; c < x_block_width(); ++c) code.data[xs + c] = 0.0;
        return code;
    }

    // ---- poses -------------------------------------------------------------

    CameraPose sample_pose(Rng& rng) const {
        if (rng.uniform() < cfg_.front_prob) return CameraPose{0.0, 0.0};
        CameraPose p;
        p.azimuth = rng.uniform(-cfg_.az_range, cfg_.az_range);
        p.elevation = rng.uniform(-cfg_.el_range, cfg_.el_range);
        return p;
    }

    // ---- rendering -----------------------------------------------------------

    // Differentiable render of a raw (de-standardized) code. Returns [2,H,W]:
    // plane 0 intensity, plane 1 depth. Composes graph ops so gradients flow
    // to the code.
    Value render_g(Graph& g, Value code, const CameraPose& pose) const {
        const std::size_t H = cfg_.image, W = cfg_.image;
        const std::size_t npix = H * W;
        if (code.v().size() != code_size()) {
            throw std::invalid_argument("render: code shape " + shape_str(code.v().shape));
        }
        const double caz = std::cos(pose.azimuth), saz = std::sin(pose.azimuth);
        const double cel = std::cos(pose.elevation), sel = std::sin(pose.elevation);

        // blob parameters: [5*blobs, 1] = map * code_flat + base
        Value flat = reshape(code, {code_size(), 1});
        Value params = add(matmul(g.leaf(blob_map_), flat),
                           reshape(g.leaf(blob_base_), {cfg_.blobs * 5, 1}));

        Value px = g.leaf(pixel_grid_x());
        Value py = g.leaf(pixel_grid_y());

        Value intensity_sum = g.leaf(Tensor::zeros({npix}));
        Value weight_sum = g.leaf(Tensor::full({npix}, kBackgroundWeight));
        Value depth_sum = g.leaf(Tensor::full({npix}, kBackgroundWeight * kBackgroundDepth));

        for (std::size_t j = 0; j < cfg_.blobs; ++j) {
            Value cx = slice_axis0(params, j * 5 + 0, j * 5 + 1);
            Value cy = slice_axis0(params, j * 5 + 1, j * 5 + 2);
            Value amp = slice_axis0(params, j * 5 + 2, j * 5 + 3);
            Value sc = slice_axis0(params, j * 5 + 3, j * 5 + 4);
            Value dep = slice_axis0(params, j * 5 + 4, j * 5 + 5);

            // parallax offset grows with depth distance from the reference plane
            Value par = scale(add_const(dep, -kDepthRef), kParallax);
            Value bx = add(scale(cx, caz), scale(par, saz));
            Value by = add(scale(cy, cel), scale(par, sel));

            Value dx = sub(px, reshape(bx, {1}));
            Value dy = sub(py, reshape(by, {1}));
            Value r2 = add(mul(dx, dx), mul(dy, dy));
            Value denom = add_const(scale(mul(sc, sc), 2.0), kScaleFloor);  // [1,1]
            Value gauss = exp_v(scale(mul(r2, recip(reshape(denom, {1}))), -1.0));

            intensity_sum = add(intensity_sum, mul(gauss, reshape(amp, {1})));

            // soft-nearest depth accumulation
            Value wdep = exp_v(scale(add_const(dep, -kDepthRef), -kDepthSharpness));
            Value wblob = mul(gauss, reshape(wdep, {1}));
            weight_sum = add(weight_sum, wblob);
            depth_sum = add(depth_sum, mul(wblob, reshape(dep, {1})));
        }

        Value intensity = sigmoid(add_const(intensity_sum, kToneBias));
        Value depth = mul(depth_sum, recip(weight_sum));
        return reshape(concat_axis0(std::vector<Value>{reshape(intensity, {1, npix}),
                                                       reshape(depth, {1, npix})}),
                       {2, H, W});
    }

    WorldImage render(const Tensor& code, const CameraPose& pose) const {
        Graph g;
        Value out = render_g(g, g.leaf(code), pose);
        return split_image(out.v());
    }

    WorldImage split_image(const Tensor& planes) const {
        const std::size_t H = cfg_.image, W = cfg_.image;
        WorldImage img;
        img.intensity = Tensor({H, W});
        img.depth = Tensor({H, W});
        std::copy(planes.data.begin(), planes.data.begin() + H * W, img.intensity.data.begin());
        std::copy(planes.data.begin() + H * W, planes.data.end(), img.depth.data.begin());
        return img;
    }

    Tensor join_image(const WorldImage& img) const {
        const std::size_t H = cfg_.image, W = cfg_.image;
        Tensor planes({2, H, W});
        std::copy(img.intensity.data.begin(), img.intensity.data.end(), planes.data.begin());
        std::copy(img.depth.data.begin(), img.depth.data.end(), planes.data.begin() + H * W);
        return planes;
    }

    // ---- paired data ----------------------------------------------------------

    Tensor psi_for(const AttributeLabel& attrs, Rng& rng) const {
        Tensor psi({cfg_.psi_dim});
        for (std::size_t i = 0; i < cfg_.psi_dim; ++i) {
            psi.data[i] = psi_proto_.data[attrs.expr_class * cfg_.psi_dim + i] +
                          cfg_.psi_jitter * rng.normal();
        }
        return psi;
    }

    std::size_t nearest_psi_class(const Tensor& psi) const {
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t cl = 0; cl < cfg_.expr_classes; ++cl) {
            double d = 0.0;
            for (std::size_t i = 0; i < cfg_.psi_dim; ++i) {
                const double diff = psi.data[i] - psi_proto_.data[cl * cfg_.psi_dim + i];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = cl;
            }
        }
        return best;
    }

    AttributeLabel random_attrs(Rng& rng) const {
        AttributeLabel a;
        a.bits.resize(cfg_.bits);
        for (std::size_t b = 0; b < cfg_.bits; ++b) a.bits[b] = rng.bernoulli(0.5) ? 1 : 0;
        a.expr_class = rng.below(cfg_.expr_classes);
        return a;
    }

    // layout helpers (public: tests assert the reserved-block contract)
    std::size_t bit_block_start(std::size_t b) const { return b * 4; }
    std::size_t x_block_start() const { return 2 * cfg_.code_dim; }
    std::size_t y_block_start() const { return 3 * cfg_.code_dim; }
    std::size_t x_block_width() const { return std::min<std::size_t>(16, cfg_.code_dim / 2); }

    static constexpr double kToneBias = -2.0;
    static constexpr double kScaleFloor = 5e-3;
    static constexpr double kDepthRef = 0.55;
    static constexpr double kParallax = 1.2;
    static constexpr double kDepthSharpness = 4.0;
    static constexpr double kBackgroundWeight = 0.02;
    static constexpr double kBackgroundDepth = 1.2;

private:
    void check_attrs(const AttributeLabel& attrs) const {
        if (attrs.bits.size() != cfg_.bits || attrs.expr_class >= cfg_.expr_classes) {
            throw std::invalid_argument("attribute label does not match world config");
        }
    }

    // unit-normalized random support over a contiguous block, scaled to `norm`
    static void fill_support(Tensor& map, std::size_t row, std::size_t start, std::size_t width,
                             double norm, Rng& rng) {
        const std::size_t kd = map.shape[1];
        double s = 0.0;
        std::vector<double> v(width);
        for (double& x : v) {
            x = rng.normal();
            s += x * x;
        }
        const double inv = norm / std::sqrt(std::max(s, 1e-12));
        for (std::size_t c = 0; c < width; ++c) map.data[row * kd + start + c] = v[c] * inv;
    }

    // support over all coordinates except the position blocks
    void fill_general(Tensor& map, std::size_t row, double norm, Rng& rng) {
        const std::size_t kd = map.shape[1];
        const std::size_t xs = x_block_start(), ys = y_block_start(), w = x_block_width();
        std::vector<double> v(kd);
        double s = 0.0;
        for (std::size_t i = 0; i < kd; ++i) {
            if ((i >= xs && i < xs + w) || (i >= ys && i < ys + w)) {
                v[i] = 0.0;
                continue;
            }
            v[i] = rng.normal();
            s += v[i] * v[i];
        }
        const double inv = norm / std::sqrt(std::max(s, 1e-12));
        for (std::size_t i = 0; i < kd; ++i) map.data[row * kd + i] = v[i] * inv;
    }

    static Tensor orthonormal_rows(std::size_t n, std::size_t dim, Rng& rng) {
        Tensor m = Tensor::randn({n, dim}, rng);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < i; ++j) {
                double dot = 0.0;
                for (std::size_t d = 0; d < dim; ++d) dot += m.at2(i, d) * m.at2(j, d);
                for (std::size_t d = 0; d < dim; ++d) m.at2(i, d) -= dot * m.at2(j, d);
            }
            double nrm = 0.0;
            for (std::size_t d = 0; d < dim; ++d) nrm += m.at2(i, d) * m.at2(i, d);
            nrm = std::sqrt(std::max(nrm, 1e-12));
            for (std::size_t d = 0; d < dim; ++d) m.at2(i, d) /= nrm;
        }
        return m;
    }

    Tensor pixel_grid_x() const {
        const std::size_t H = cfg_.image, W = cfg_.image;
        Tensor t({H * W});
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                t.data[y * W + x] = (2.0 * (static_cast<double>(x) + 0.5)) / static_cast<double>(W) - 1.0;
            }
        }
        return t;
    }

    Tensor pixel_grid_y() const {
        const std::size_t H = cfg_.image, W = cfg_.image;
        Tensor t({H * W});
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                t.data[y * W + x] = (2.0 * (static_cast<double>(y) + 0.5)) / static_cast<double>(H) - 1.0;
            }
        }
        return t;
    }

    WorldConfig cfg_;
    Vocabulary vocab_;
    Tensor code_proto_;  // [E, D]
    Tensor psi_proto_;   // [E, psi_dim]
    Tensor zmap_;        // [K*D, z_dim]
    Tensor zbias_;       // [K*D]
    Tensor blob_map_;    // [5*blobs, K*D]
    Tensor blob_base_;   // [5*blobs]
};

}  // namespace sdlb
