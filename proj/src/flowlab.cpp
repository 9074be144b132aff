#include "layervec/flowlab.hpp"

#include "layervec/error.hpp"
#include "layervec/rasterizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace layervec::flow {

using nlohmann::json;

namespace {

void require_same(const Latent& a, const Latent& b, const char* what) {
    if (!a.same_shape(b))
        throw FormatError(std::string(what) + ": latent shapes differ");
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Mat silu(const Mat& x) {
    return x.unaryExpr([](double v) { return v * sigmoid(v); });
}

Mat silu_grad(const Mat& x) {
    return x.unaryExpr([](double v) {
        const double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
    });
}

Mat randn(int rows, int cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, stddev);
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            m(i, j) = n(rng);
    return m;
}

void fill_gaussian(Latent& z, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (Eigen::Index i = 0; i < z.size(); ++i)
        z.data[i] = n(rng);
}

template <class M> std::vector<Mat*> tensors(M& m) {
    std::vector<Mat*> out;
    m.visit([&](const std::string&, Mat& t) { out.push_back(&t); });
    return out;
}

template <class M> M zeroed(const M& m) {
    M z = m;
    z.visit([](const std::string&, Mat& t) { t.setZero(); });
    return z;
}

template <class M> bool all_finite(M& m) {
    bool ok = true;
    m.visit([&](const std::string&, Mat& t) { ok = ok && t.allFinite(); });
    return ok;
}

// ---------------------------------------------------------------- attention core

struct AttentionCache {
    Mat q, k, v, o;
    std::vector<Mat> a;
};

void attention_forward(const Mat& x, const Mat& wq, const Mat& wk, const Mat& wv, int heads, AttentionCache& c) {
    const auto d = wq.cols();
    const auto dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.q = x * wq;
    c.k = x * wk;
    c.v = x * wv;
    c.o.resize(x.rows(), d);
    c.a.assign(static_cast<std::size_t>(heads), Mat());
    for (int h = 0; h < heads; ++h) {
        Mat s = c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose() * scale;
        for (Eigen::Index r = 0; r < s.rows(); ++r) {
            const double mx = s.row(r).maxCoeff();
            s.row(r) = (s.row(r).array() - mx).exp().matrix();
            s.row(r) /= s.row(r).sum();
        }
        c.o.middleCols(h * dh, dh) = s * c.v.middleCols(h * dh, dh);
        c.a[static_cast<std::size_t>(h)] = std::move(s);
    }
}

// Given dO, accumulates dWq/dWk/dWv and returns dX.
Mat attention_backward(const Mat& x, const Mat& wq, const Mat& wk, const Mat& wv, int heads, const AttentionCache& c,
                       const Mat& d_o, Mat& gwq, Mat& gwk, Mat& gwv) {
    const auto d = wq.cols();
    const auto dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat dq = Mat::Zero(x.rows(), d), dk = Mat::Zero(x.rows(), d), dv = Mat::Zero(x.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const Mat& a = c.a[static_cast<std::size_t>(h)];
        const Mat doh = d_o.middleCols(h * dh, dh);
        const Mat da = doh * c.v.middleCols(h * dh, dh).transpose();
        dv.middleCols(h * dh, dh) = a.transpose() * doh;
        const Eigen::VectorXd rs = (da.array() * a.array()).rowwise().sum();
        const Mat ds = (a.array() * (da.colwise() - rs).array()).matrix();
        dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh) * scale;
        dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh) * scale;
    }
    gwq += x.transpose() * dq;
    gwk += x.transpose() * dk;
    gwv += x.transpose() * dv;
    return dq * wq.transpose() + dk * wk.transpose() + dv * wv.transpose();
}

// ---------------------------------------------------------------- velocity net

struct BlockCache {
    Mat x_in;
    AttentionCache att;
    Mat x_mid, hpre, h;
};

struct NetCache {
    Mat pz, pc, tfeat, x_out;
    std::vector<BlockCache> blocks;
    int tag = 0;
};

Mat patchify(const Latent& z, int patch) {
    const int g = z.height / patch;
    Mat p(g * g, z.channels * patch * patch);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx)
            for (int c = 0; c < z.channels; ++c)
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        p(gy * g + gx, (c * patch + dy) * patch + dx) = z.at(c, gy * patch + dy, gx * patch + dx);
    return p;
}

Latent unpatchify(const Mat& p, int channels, int size, int patch) {
    const int g = size / patch;
    Latent z(channels, size, size);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx)
            for (int c = 0; c < channels; ++c)
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        z.at(c, gy * patch + dy, gx * patch + dx) = p(gy * g + gx, (c * patch + dy) * patch + dx);
    return z;
}

Mat patchify_image(const RasterImage& img, int patch) {
    const int g = img.width / patch;
    Mat p(g * g, img.channels * patch * patch);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx)
            for (int c = 0; c < img.channels; ++c)
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        p(gy * g + gx, (c * patch + dy) * patch + dx) = img.at(gx * patch + dx, gy * patch + dy, c);
    return p;
}

Mat time_features(double t, int freqs) {
    Mat f(1, 2 * freqs);
    for (int k = 0; k < freqs; ++k) {
        const double w = std::numbers::pi * std::ldexp(1.0, k);
        f(0, 2 * k) = std::sin(w * t);
        f(0, 2 * k + 1) = std::cos(w * t);
    }
    return f;
}

void check_input(const FlowModel& m, const FlowInput& in) {
    const auto& c = m.cfg;
    if (!in.z || !in.cond)
        throw FormatError("velocity: missing input");
    if (in.z->channels != c.channels || in.z->height != c.size || in.z->width != c.size)
        throw FormatError("velocity: latent shape does not match the model");
    if (in.cond->width != c.size || in.cond->height != c.size || in.cond->channels != c.cond_channels)
        throw FormatError("velocity: condition raster shape does not match the model");
    if (in.tag < 0 || in.tag >= c.tags)
        throw DomainError("velocity: tag " + std::to_string(in.tag) + " outside the vocabulary");
}

Mat forward(const FlowModel& m, const FlowInput& in, NetCache& cache) {
    check_input(m, in);
    const auto& cfg = m.cfg;
    const int nz = cfg.tokens();
    cache.pz = patchify(*in.z, cfg.patch);
    cache.pc = patchify_image(*in.cond, cfg.patch);
    cache.tfeat = time_features(in.t, cfg.time_freqs);
    cache.tag = in.tag;

    Mat x(1 + 2 * nz, cfg.d_model);
    x.row(0) = m.tag.row(in.tag);
    Mat xz = cache.pz * m.wz + m.pos_z;
    xz.rowwise() += (m.bz + cache.tfeat * m.wt + m.bt).row(0);
    Mat xc = cache.pc * m.wc + m.pos_c;
    xc.rowwise() += m.bc.row(0);
    x.middleRows(1, nz) = xz;
    x.middleRows(1 + nz, nz) = xc;

    cache.blocks.resize(m.blocks.size());
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        const Block& b = m.blocks[i];
        BlockCache& bc = cache.blocks[i];
        bc.x_in = x;
        attention_forward(x, b.wq, b.wk, b.wv, cfg.heads, bc.att);
        bc.x_mid = x + bc.att.o * b.wo;
        bc.hpre = bc.x_mid * b.w1;
        bc.hpre.rowwise() += b.b1.row(0);
        bc.h = silu(bc.hpre);
        x = bc.x_mid + bc.h * b.w2;
        x.rowwise() += b.b2.row(0);
    }
    cache.x_out = x;
    Mat out = x.middleRows(1, nz) * m.wout;
    out.rowwise() += m.bout.row(0);
    return out;
}

// Returns d/dpz.
Mat backward(const FlowModel& m, const NetCache& cache, const Mat& dout, FlowModel& g) {
    const auto& cfg = m.cfg;
    const int nz = cfg.tokens();
    g.wout += cache.x_out.middleRows(1, nz).transpose() * dout;
    g.bout += dout.colwise().sum();
    Mat dx = Mat::Zero(cache.x_out.rows(), cache.x_out.cols());
    dx.middleRows(1, nz) = dout * m.wout.transpose();

    for (std::size_t ii = m.blocks.size(); ii-- > 0;) {
        const Block& b = m.blocks[ii];
        Block& gb = g.blocks[ii];
        const BlockCache& bc = cache.blocks[ii];
        gb.w2 += bc.h.transpose() * dx;
        gb.b2 += dx.colwise().sum();
        const Mat dhpre = ((dx * b.w2.transpose()).array() * silu_grad(bc.hpre).array()).matrix();
        gb.w1 += bc.x_mid.transpose() * dhpre;
        gb.b1 += dhpre.colwise().sum();
        const Mat dmid = dx + dhpre * b.w1.transpose();
        gb.wo += bc.att.o.transpose() * dmid;
        const Mat d_o = dmid * b.wo.transpose();
        dx = dmid + attention_backward(bc.x_in, b.wq, b.wk, b.wv, cfg.heads, bc.att, d_o, gb.wq, gb.wk, gb.wv);
    }

    g.tag.row(cache.tag) += dx.row(0);
    const Mat dxz = dx.middleRows(1, nz);
    const Mat dxc = dx.middleRows(1 + nz, nz);
    const Mat dsum = dxz.colwise().sum();
    g.wz += cache.pz.transpose() * dxz;
    g.bz += dsum;
    g.wt += cache.tfeat.transpose() * dsum;
    g.bt += dsum;
    g.pos_z += dxz;
    g.wc += cache.pc.transpose() * dxc;
    g.bc += dxc.colwise().sum();
    g.pos_c += dxc;
    return dxz * m.wz.transpose();
}

// ---------------------------------------------------------------- NPV internals

RasterImage pool_condition(const RasterImage& cond, const NpvConfig& cfg) {
    if (cond.channels != cfg.cond_channels || cond.width != cond.height || cond.width < cfg.size ||
        cond.width % cfg.size != 0)
        throw FormatError("npv: condition raster must be a square multiple of the latent size with " +
                          std::to_string(cfg.cond_channels) + " channels");
    return cond.width == cfg.size ? cond : downsample(cond, cond.width / cfg.size);
}

// (S² × ch) → (S² × 9·ch), zero padding, column = ch·9 + ky·3 + kx.
Mat im2col(const Mat& x, int s) {
    const auto ch = x.cols();
    Mat cols = Mat::Zero(x.rows(), 9 * ch);
    for (int y = 0; y < s; ++y)
        for (int xx = 0; xx < s; ++xx)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const int sy = y + ky - 1, sx = xx + kx - 1;
                    if (sy < 0 || sx < 0 || sy >= s || sx >= s)
                        continue;
                    for (Eigen::Index c = 0; c < ch; ++c)
                        cols(y * s + xx, c * 9 + ky * 3 + kx) = x(sy * s + sx, c);
                }
    return cols;
}

Mat col2im(const Mat& cols, int s, Eigen::Index ch) {
    Mat x = Mat::Zero(static_cast<Eigen::Index>(s) * s, ch);
    for (int y = 0; y < s; ++y)
        for (int xx = 0; xx < s; ++xx)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const int sy = y + ky - 1, sx = xx + kx - 1;
                    if (sy < 0 || sx < 0 || sy >= s || sx >= s)
                        continue;
                    for (Eigen::Index c = 0; c < ch; ++c)
                        x(sy * s + sx, c) += cols(y * s + xx, c * 9 + ky * 3 + kx);
                }
    return x;
}

struct NpvCache {
    Mat cols1, a1, h1, cols2, a2, xhat, gn, phi, lv_raw;
    Eigen::VectorXd inv_std; // per group
    Mat mu, lv;
};

constexpr double kGroupNormEps = 1e-5;
constexpr double kLogVarClamp = 10.0;

void npv_run(const NpvHead& h, const RasterImage& cond, NpvCache& c) {
    h.cfg.validate();
    const RasterImage pooled = pool_condition(cond, h.cfg);
    const int s = h.cfg.size;
    Mat x0(static_cast<Eigen::Index>(s) * s, h.cfg.cond_channels);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
            for (int ch = 0; ch < h.cfg.cond_channels; ++ch)
                x0(y * s + x, ch) = pooled.at(x, y, ch);
    c.cols1 = im2col(x0, s);
    c.a1 = c.cols1 * h.w1.transpose();
    c.a1.rowwise() += h.b1.row(0);
    c.h1 = silu(c.a1);
    c.cols2 = im2col(c.h1, s);
    c.a2 = c.cols2 * h.w2.transpose();
    c.a2.rowwise() += h.b2.row(0);

    const int f = h.cfg.features, groups = h.cfg.groups, per = f / groups;
    c.xhat.resize(c.a2.rows(), f);
    c.inv_std.resize(groups);
    for (int g = 0; g < groups; ++g) {
        const auto block = c.a2.middleCols(g * per, per);
        const double mean = block.mean();
        const double var = (block.array() - mean).square().mean();
        const double inv = 1.0 / std::sqrt(var + kGroupNormEps);
        c.inv_std[g] = inv;
        c.xhat.middleCols(g * per, per) = ((block.array() - mean) * inv).matrix();
    }
    c.gn = (c.xhat.array().rowwise() * h.gamma.row(0).array()).matrix();
    c.gn.rowwise() += h.beta.row(0);
    c.phi = silu(c.gn);
    c.mu = c.phi * h.w_mu.transpose();
    c.mu.rowwise() += h.b_mu.row(0);
    c.lv_raw = c.phi * h.w_lv.transpose();
    c.lv_raw.rowwise() += h.b_lv.row(0);
    c.lv = c.lv_raw.cwiseMax(-kLogVarClamp).cwiseMin(kLogVarClamp);
}

Latent to_latent(const Mat& m, int channels, int s) {
    Latent z(channels, s, s);
    for (int ch = 0; ch < channels; ++ch)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                z.at(ch, y, x) = m(y * s + x, ch);
    return z;
}

Mat from_latent(const Latent& z) {
    Mat m(static_cast<Eigen::Index>(z.height) * z.width, z.channels);
    for (int ch = 0; ch < z.channels; ++ch)
        for (int y = 0; y < z.height; ++y)
            for (int x = 0; x < z.width; ++x)
                m(y * z.width + x, ch) = z.at(ch, y, x);
    return m;
}

// ---------------------------------------------------------------- Adam

struct Adam {
    std::vector<Mat> m, v;
    long t = 0;

    void step(const std::vector<Mat*>& params, const std::vector<Mat*>& grads, double lr, double b1, double b2,
              double eps) {
        if (m.empty()) {
            for (const Mat* p : params) {
                m.push_back(Mat::Zero(p->rows(), p->cols()));
                v.push_back(Mat::Zero(p->rows(), p->cols()));
            }
        }
        ++t;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * *grads[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grads[i]->cwiseProduct(*grads[i]);
            params[i]->array() -= lr * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps);
        }
    }
};

} // namespace

// ---------------------------------------------------------------- flow matching

Latent interpolate(const Latent& z0, const Latent& z1, double t) {
    require_same(z0, z1, "interpolate");
    if (!(t >= 0.0 && t <= 1.0))
        throw DomainError("interpolate: t must lie in [0,1]");
    Latent z = z0;
    z.data = (1.0 - t) * z1.data + t * z0.data;
    return z;
}

double fm_loss(const Latent& v_pred, const Latent& z0, const Latent& z1) {
    require_same(v_pred, z0, "fm_loss");
    require_same(z0, z1, "fm_loss");
    if (v_pred.size() == 0)
        return 0.0;
    return (v_pred.data - (z0.data - z1.data)).squaredNorm() / static_cast<double>(v_pred.size());
}

MmaResult mma_attention(const Mat& text, const Mat& latent, const Mat& cond, const MmaWeights& w) {
    const auto d = w.wq.rows();
    for (const Mat* x : {&text, &latent, &cond})
        if (x->rows() > 0 && x->cols() != d)
            throw FormatError("mma_attention: token width differs from the weights");
    for (const Mat* x : {&w.wq, &w.wk, &w.wv})
        if (x->rows() != d || x->cols() != d)
            throw FormatError("mma_attention: projections must be d × d");
    if (w.heads < 1 || d % w.heads != 0)
        throw FormatError("mma_attention: heads must divide d");
    const auto n = text.rows() + latent.rows() + cond.rows();
    if (n == 0)
        throw FormatError("mma_attention: no tokens");
    Mat x(n, d);
    if (text.rows())
        x.topRows(text.rows()) = text;
    if (latent.rows())
        x.middleRows(text.rows(), latent.rows()) = latent;
    if (cond.rows())
        x.bottomRows(cond.rows()) = cond;
    AttentionCache c;
    attention_forward(x, w.wq, w.wk, w.wv, w.heads, c);
    MmaResult r;
    r.text = c.o.topRows(text.rows());
    r.latent = c.o.middleRows(text.rows(), latent.rows());
    r.cond = c.o.bottomRows(cond.rows());
    r.attention = std::move(c.a);
    return r;
}

// ---------------------------------------------------------------- velocity net

void FlowConfig::validate() const {
    if (channels < 1 || size < 1 || patch < 1 || cond_channels < 1 || d_model < 1 || heads < 1 || blocks < 0 ||
        mlp_hidden < 1 || tags < 1 || time_freqs < 1)
        throw DomainError("flow config: sizes must be positive");
    if (size % patch != 0)
        throw DomainError("flow config: patch must divide the latent size");
    if (d_model % heads != 0)
        throw DomainError("flow config: heads must divide d_model");
}

FlowModel init_flow_model(const FlowConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const int d = cfg.d_model, nz = cfg.tokens();
    auto lin = [&](int in, int out) { return randn(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng); };
    FlowModel m;
    m.cfg = cfg;
    m.wz = lin(cfg.latent_features(), d);
    m.bz = Mat::Zero(1, d);
    m.wc = lin(cfg.cond_features(), d);
    m.bc = Mat::Zero(1, d);
    m.wt = lin(2 * cfg.time_freqs, d);
    m.bt = Mat::Zero(1, d);
    m.pos_z = randn(nz, d, 0.1, rng);
    m.pos_c = randn(nz, d, 0.1, rng);
    m.tag = randn(cfg.tags, d, 0.1, rng);
    for (int i = 0; i < cfg.blocks; ++i) {
        Block b;
        b.wq = lin(d, d);
        b.wk = lin(d, d);
        b.wv = lin(d, d);
        b.wo = lin(d, d) * 0.5;
        b.w1 = lin(d, cfg.mlp_hidden);
        b.b1 = Mat::Zero(1, cfg.mlp_hidden);
        b.w2 = lin(cfg.mlp_hidden, d) * 0.5;
        b.b2 = Mat::Zero(1, d);
        m.blocks.push_back(std::move(b));
    }
    m.wout = lin(d, cfg.latent_features()) * 0.1;
    m.bout = Mat::Zero(1, cfg.latent_features());
    return m;
}

FlowModel zeros_like(const FlowModel& m) { return zeroed(m); }

Latent velocity(const FlowModel& m, const FlowInput& in) {
    NetCache cache;
    const Mat out = forward(m, in, cache);
    return unpatchify(out, m.cfg.channels, m.cfg.size, m.cfg.patch);
}

Latent velocity_backward(const FlowModel& m, const FlowInput& in, const Latent& dv, FlowModel& grad) {
    NetCache cache;
    forward(m, in, cache);
    const Mat dpz = backward(m, cache, patchify(dv, m.cfg.patch), grad);
    return unpatchify(dpz, m.cfg.channels, m.cfg.size, m.cfg.patch);
}

// ---------------------------------------------------------------- NPV head

void NpvConfig::validate() const {
    if (channels < 1 || size < 1 || cond_channels < 1 || features < 1 || groups < 1)
        throw DomainError("npv config: sizes must be positive");
    if (features % groups != 0)
        throw DomainError("npv config: groups must divide features");
}

NpvHead init_npv_head(const NpvConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    NpvHead h;
    h.cfg = cfg;
    h.w1 = randn(cfg.features, 9 * cfg.cond_channels, 1.0 / std::sqrt(9.0 * cfg.cond_channels), rng);
    h.b1 = Mat::Zero(1, cfg.features);
    h.w2 = randn(cfg.features, 9 * cfg.features, 1.0 / std::sqrt(9.0 * cfg.features), rng);
    h.b2 = Mat::Zero(1, cfg.features);
    h.gamma = Mat::Ones(1, cfg.features);
    h.beta = Mat::Zero(1, cfg.features);
    h.w_mu = Mat::Zero(cfg.channels, cfg.features);
    h.b_mu = Mat::Zero(1, cfg.channels);
    h.w_lv = Mat::Zero(cfg.channels, cfg.features);
    h.b_lv = Mat::Zero(1, cfg.channels);
    return h;
}

NpvHead zeros_like(const NpvHead& h) { return zeroed(h); }

NpvOutput npv_forward(const NpvHead& head, const RasterImage& cond) {
    NpvCache c;
    npv_run(head, cond, c);
    return {to_latent(c.mu, head.cfg.channels, head.cfg.size), to_latent(c.lv, head.cfg.channels, head.cfg.size)};
}

void npv_backward(const NpvHead& h, const RasterImage& cond, const Latent& dmu_l, const Latent& dlv_l, NpvHead& g) {
    NpvCache c;
    npv_run(h, cond, c);
    const Mat dmu = from_latent(dmu_l);
    Mat dlv = from_latent(dlv_l);
    if (dmu.rows() != c.mu.rows() || dmu.cols() != c.mu.cols() || dlv.rows() != c.lv.rows() || dlv.cols() != c.lv.cols())
        throw FormatError("npv_backward: gradient shape differs from the head output");
    for (Eigen::Index i = 0; i < dlv.size(); ++i)
        if (std::abs(c.lv_raw(i)) > kLogVarClamp)
            dlv(i) = 0.0;
    g.w_mu += dmu.transpose() * c.phi;
    g.b_mu += dmu.colwise().sum();
    g.w_lv += dlv.transpose() * c.phi;
    g.b_lv += dlv.colwise().sum();
    const Mat dphi = dmu * h.w_mu + dlv * h.w_lv;
    const Mat dgn = (dphi.array() * silu_grad(c.gn).array()).matrix();
    g.gamma += (dgn.array() * c.xhat.array()).colwise().sum().matrix();
    g.beta += dgn.colwise().sum();
    const Mat dxhat = (dgn.array().rowwise() * h.gamma.row(0).array()).matrix();

    const int f = h.cfg.features, groups = h.cfg.groups, per = f / groups;
    Mat da2(dxhat.rows(), f);
    for (int gi = 0; gi < groups; ++gi) {
        const auto dx = dxhat.middleCols(gi * per, per);
        const auto xh = c.xhat.middleCols(gi * per, per);
        const double m1 = dx.mean();
        const double m2 = (dx.array() * xh.array()).mean();
        da2.middleCols(gi * per, per) = (c.inv_std[gi] * (dx.array() - m1 - xh.array() * m2)).matrix();
    }
    g.w2 += da2.transpose() * c.cols2;
    g.b2 += da2.colwise().sum();
    const Mat dh1 = col2im(da2 * h.w2, h.cfg.size, f);
    const Mat da1 = (dh1.array() * silu_grad(c.a1).array()).matrix();
    g.w1 += da1.transpose() * c.cols1;
    g.b1 += da1.colwise().sum();
}

// ---------------------------------------------------------------- NPV losses

Latent reparameterize(const Latent& mu, const Latent& logvar, const Latent& eps) {
    require_same(mu, logvar, "reparameterize");
    require_same(mu, eps, "reparameterize");
    Latent z = mu;
    z.data = mu.data.array() + (0.5 * logvar.data.array()).exp() * eps.data.array();
    return z;
}

double kl_loss(const Latent& mu, const Latent& logvar, Latent* dmu, Latent* dlogvar) {
    require_same(mu, logvar, "kl_loss");
    const double n = static_cast<double>(mu.size());
    if (n == 0)
        return 0.0;
    const auto var = logvar.data.array().exp();
    const double loss = 0.5 * (mu.data.array().square() + var - logvar.data.array() - 1.0).sum() / n;
    if (dmu) {
        *dmu = mu;
        dmu->data = mu.data / n;
    }
    if (dlogvar) {
        *dlogvar = logvar;
        dlogvar->data = (0.5 * (var - 1.0) / n).matrix();
    }
    return loss;
}

void NpvLossConfig::validate(const Latent& mu) const {
    if (mu.channels < 2)
        throw DomainError("cov_loss: needs at least two channels");
    if (patches < 1)
        throw DomainError("cov_loss: N must be at least 1");
    if (patch_size < 2 || patch_size > mu.height || patch_size > mu.width)
        throw DomainError("cov_loss: patch size must lie in [2, latent side]");
}

int effective_patches(const Latent& mu, const NpvLossConfig& cfg) {
    const long positions = static_cast<long>(mu.height - cfg.patch_size + 1) * (mu.width - cfg.patch_size + 1);
    return static_cast<int>(std::min<long>(cfg.patches, 4 * positions));
}

double cov_loss(const Latent& mu, const NpvLossConfig& cfg, std::uint64_t seed, Latent* dmu) {
    cfg.validate(mu);
    const int c = mu.channels, p = cfg.patch_size, n = effective_patches(mu, cfg);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> ys(0, mu.height - p), xs(0, mu.width - p);
    if (dmu)
        *dmu = Latent(mu.channels, mu.height, mu.width);
    const double k = 1.0 / (static_cast<double>(c) * (c - 1));
    double total = 0.0;
    Mat rows(c, p * p);
    Mat unit(c, p * p);
    Eigen::VectorXd norms(c);
    for (int w = 0; w < n; ++w) {
        const int y0 = ys(rng), x0 = xs(rng);
        for (int ch = 0; ch < c; ++ch)
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    rows(ch, dy * p + dx) = mu.at(ch, y0 + dy, x0 + dx);
        for (int ch = 0; ch < c; ++ch) {
            const double mean = rows.row(ch).mean();
            unit.row(ch) = rows.row(ch).array() - mean;
            norms[ch] = unit.row(ch).norm();
            if (norms[ch] > 1e-12)
                unit.row(ch) /= norms[ch];
            else
                unit.row(ch).setZero();
        }
        const Mat r = unit * unit.transpose();
        double loss = 0.0;
        for (int i = 0; i < c; ++i)
            for (int j = 0; j < c; ++j)
                if (i != j)
                    loss += r(i, j) * r(i, j);
        total += k * loss;
        if (dmu) {
            // dL/dũ_i = 4k Σ_{j≠i} R_ij ũ_j, then through normalisation and centring
            Mat r_off = r;
            r_off.diagonal().setZero();
            const Mat gu = 4.0 * k * r_off * unit;
            for (int ch = 0; ch < c; ++ch) {
                if (norms[ch] <= 1e-12)
                    continue;
                const Eigen::RowVectorXd u = unit.row(ch);
                Eigen::RowVectorXd gc = (gu.row(ch) - u * u.dot(gu.row(ch))) / norms[ch];
                gc.array() -= gc.mean();
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        dmu->at(ch, y0 + dy, x0 + dx) += gc[dy * p + dx] / n;
            }
        }
    }
    return total / n;
}

double total_loss(double fm, double kl, double cov, const NpvLossConfig& cfg) {
    return fm + cfg.beta * kl + cfg.lambda * cov;
}

// ---------------------------------------------------------------- sampling

Latent euler_sample(const Latent& init, int steps, const VelocityField& v) {
    if (steps < 1)
        throw DomainError("sample: steps must be at least 1");
    Latent z = init;
    const double dt = 1.0 / steps;
    for (int s = 0; s < steps; ++s) {
        const Latent vel = v(z, s * dt);
        require_same(vel, z, "sample");
        z.data += dt * vel.data;
        if (!z.data.allFinite())
            throw NumericError("sample: non-finite state", s);
    }
    return z;
}

Latent sample(const FlowModel& m, const Latent& init, const RasterImage& cond, int tag, int steps) {
    return euler_sample(init, steps, [&](const Latent& z, double t) {
        return velocity(m, FlowInput{&z, t, &cond, tag});
    });
}

// ---------------------------------------------------------------- data

Latent latent_from_image(const RasterImage& rgb) {
    if (rgb.channels != 3)
        throw FormatError("latent_from_image: expected RGB");
    Latent z(2, rgb.height, rgb.width);
    for (int y = 0; y < rgb.height; ++y)
        for (int x = 0; x < rgb.width; ++x) {
            const double r = rgb.at(x, y, 0), g = rgb.at(x, y, 1), b = rgb.at(x, y, 2);
            z.at(0, y, x) = 2.0 * (r + g + b) / 3.0 - 1.0;
            z.at(1, y, x) = 2.0 * (r - b);
        }
    return z;
}

FlowItem item_from_document(const VectorDocument& doc, int tag, int size, int oversample) {
    if (size < 1 || oversample < 1)
        throw DomainError("item_from_document: sizes must be positive");
    raster::RenderParams params;
    params.threads = 1;
    const RasterImage big = raster::render(doc, params, {size * oversample, size * oversample});
    FlowItem item;
    item.cond = oversample == 1 ? big : downsample(big, oversample);
    item.target = latent_from_image(item.cond);
    item.tag = tag;
    return item;
}

std::vector<std::pair<VectorDocument, int>> make_toy_documents(std::uint64_t seed, int count, int canvas) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::pair<VectorDocument, int>> out;
    const double k = 0.5522847498307936;
    for (int i = 0; i < count; ++i) {
        VectorDocument doc;
        doc.width = doc.height = canvas;
        const double w = canvas;
        auto rect = [](double x0, double y0, double x1, double y1) {
            const geometry::Point2 c[4] = {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
            std::vector<geometry::Point2> pts;
            for (int s = 0; s < 4; ++s) {
                const auto a = c[s], b = c[(s + 1) % 4];
                pts.push_back(a);
                pts.push_back(a + (1.0 / 3.0) * (b - a));
                pts.push_back(a + (2.0 / 3.0) * (b - a));
            }
            return geometry::BezierPath(std::move(pts));
        };
        RegionNode bg;
        bg.id = "bg";
        bg.path = rect(0, 0, w, w);
        const double tint = 0.15 + 0.2 * u(rng);
        bg.fill = {0.85 - tint * u(rng), 0.85 - tint * u(rng), 0.85 - tint * u(rng)};
        doc.roots.push_back(bg);
        const int shapes = 1 + static_cast<int>(rng() % 3);
        double largest = -1.0;
        bool largest_ellipse = false;
        for (int s = 0; s < shapes; ++s) {
            const double cx = w * (0.25 + 0.5 * u(rng)), cy = w * (0.25 + 0.5 * u(rng));
            const double rx = w * (0.1 + 0.15 * u(rng)), ry = w * (0.1 + 0.15 * u(rng));
            const bool ellipse = u(rng) < 0.5;
            RegionNode r;
            r.id = "s" + std::to_string(s);
            if (ellipse) {
                r.path = geometry::BezierPath({{cx + rx, cy}, {cx + rx, cy + k * ry}, {cx + k * rx, cy + ry},
                                               {cx, cy + ry}, {cx - k * rx, cy + ry}, {cx - rx, cy + k * ry},
                                               {cx - rx, cy}, {cx - rx, cy - k * ry}, {cx - k * rx, cy - ry},
                                               {cx, cy - ry}, {cx + k * rx, cy - ry}, {cx + rx, cy - k * ry}});
            } else {
                r.path = rect(cx - rx, cy - ry, cx + rx, cy + ry);
            }
            r.fill = {u(rng), u(rng), u(rng)};
            doc.roots.push_back(std::move(r));
            const double area = rx * ry * (ellipse ? std::numbers::pi : 4.0);
            if (area > largest) {
                largest = area;
                largest_ellipse = ellipse;
            }
        }
        const int tag = std::min(3, shapes - 1 + (largest_ellipse ? 1 : 0));
        out.emplace_back(std::move(doc), tag);
    }
    return out;
}

Latent gaussian_latent(int c, int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Latent z(c, h, w);
    fill_gaussian(z, rng);
    return z;
}

// ---------------------------------------------------------------- training

StepLoss item_loss(const FlowModel& m, const NpvHead* npv, const FlowItem& item, const Latent& eps, double t,
                   const NpvLossConfig& loss, std::uint64_t cov_seed, FlowModel* gm, NpvHead* gh) {
    StepLoss out;
    Latent z1 = eps;
    NpvOutput head;
    if (npv) {
        head = npv_forward(*npv, item.cond);
        z1 = reparameterize(head.mu, head.logvar, eps);
    }
    const Latent zt = interpolate(item.target, z1, t);
    NetCache cache;
    const Mat vout = forward(m, FlowInput{&zt, t, &item.cond, item.tag}, cache);
    const Latent v = unpatchify(vout, m.cfg.channels, m.cfg.size, m.cfg.patch);
    const Eigen::VectorXd r = v.data - (item.target.data - z1.data);
    const double n = static_cast<double>(r.size());
    out.fm = r.squaredNorm() / n;

    Latent dmu_kl, dlv_kl, dmu_cov;
    const bool want = gm != nullptr || gh != nullptr;
    if (npv) {
        out.kl = kl_loss(head.mu, head.logvar, want ? &dmu_kl : nullptr, want ? &dlv_kl : nullptr);
        if (loss.lambda != 0.0)
            out.cov = cov_loss(head.mu, loss, cov_seed, want ? &dmu_cov : nullptr);
    }
    out.total = total_loss(out.fm, out.kl, out.cov, loss);
    if (!want)
        return out;

    Latent dv = v;
    dv.data = 2.0 * r / n;
    FlowModel scratch;
    FlowModel& g = gm ? *gm : (scratch = zeros_like(m));
    const Mat dpz = backward(m, cache, patchify(dv, m.cfg.patch), g);
    if (npv && gh) {
        const Latent dzt = unpatchify(dpz, m.cfg.channels, m.cfg.size, m.cfg.patch);
        Latent dz1 = dv;
        dz1.data = (1.0 - t) * dzt.data + dv.data;
        Latent dmu = dz1;
        dmu.data += loss.beta * dmu_kl.data;
        if (loss.lambda != 0.0)
            dmu.data += loss.lambda * dmu_cov.data;
        Latent dlv = dz1;
        dlv.data = (dz1.data.array() * eps.data.array() * 0.5 * (0.5 * head.logvar.data.array()).exp()).matrix() +
                   loss.beta * dlv_kl.data;
        npv_backward(*npv, item.cond, dmu, dlv, *gh);
    }
    return out;
}

Latent initial_noise(const NpvHead* npv, const FlowItem& item, const Latent& eps) {
    if (!npv)
        return eps;
    const auto out = npv_forward(*npv, item.cond);
    return reparameterize(out.mu, out.logvar, eps);
}

double sampling_mse(const FlowModel& m, const NpvHead* npv, const std::vector<FlowItem>& items, int steps,
                    std::uint64_t seed) {
    if (items.empty())
        return 0.0;
    std::mt19937_64 rng(seed);
    double total = 0.0;
    for (const auto& item : items) {
        Latent eps(item.target.channels, item.target.height, item.target.width);
        fill_gaussian(eps, rng);
        const Latent z = sample(m, initial_noise(npv, item, eps), item.cond, item.tag, steps);
        total += (z.data - item.target.data).squaredNorm() / static_cast<double>(z.size());
    }
    return total / static_cast<double>(items.size());
}

TrainResult train_flow(const std::vector<FlowItem>& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    if (data.empty())
        throw FormatError("train_flow: empty dataset");
    if (cfg.optimizer != "adam")
        throw DomainError("train_flow: unsupported optimizer '" + cfg.optimizer + "'");
    if (cfg.batch < 1 || cfg.stage1_epochs < 0 || cfg.stage2_epochs < 0 || !(cfg.lr >= 0) || !(cfg.npv_lr >= 0))
        throw DomainError("train_flow: invalid schedule");
    cfg.flow.validate();
    cfg.npv.validate();
    if (cfg.npv.channels != cfg.flow.channels || cfg.npv.size != cfg.flow.size ||
        cfg.npv.cond_channels != cfg.flow.cond_channels)
        throw DomainError("train_flow: NPV and flow shapes disagree");
    for (const auto& item : data)
        if (item.target.channels != cfg.flow.channels || item.target.height != cfg.flow.size ||
            item.target.width != cfg.flow.size)
            throw FormatError("train_flow: item latent shape does not match the config");
    if (cfg.stage2_epochs > 0 && cfg.loss.lambda != 0.0)
        cfg.loss.validate(data.front().target);

    std::mt19937_64 rng(cfg.seed);
    TrainResult res;
    res.model = init_flow_model(cfg.flow, rng());
    res.npv = init_npv_head(cfg.npv, rng());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Adam adam_net, adam_npv;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    auto run_stage = [&](int stage, int epochs) {
        for (int e = 0; e < epochs; ++e) {
            std::shuffle(order.begin(), order.end(), rng);
            EpochStats stats{stage, e};
            for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch)) {
                const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch));
                FlowModel gm = zeros_like(res.model);
                NpvHead gh = zeros_like(res.npv);
                for (std::size_t i = b0; i < b1; ++i) {
                    const FlowItem& item = data[order[i]];
                    Latent eps(item.target.channels, item.target.height, item.target.width);
                    fill_gaussian(eps, rng);
                    const double t = unit(rng);
                    const std::uint64_t cov_seed = rng();
                    const StepLoss l = item_loss(res.model, stage == 2 ? &res.npv : nullptr, item, eps, t, cfg.loss,
                                                 cov_seed, &gm, stage == 2 ? &gh : nullptr);
                    stats.fm += l.fm;
                    stats.kl += l.kl;
                    stats.cov += l.cov;
                    stats.total += l.total;
                }
                const double scale = 1.0 / static_cast<double>(b1 - b0);
                gm.visit([&](const std::string&, Mat& t) { t *= scale; });
                if (!std::isfinite(stats.total) || !all_finite(gm))
                    throw NumericError("train_flow: diverged in stage " + std::to_string(stage) + " epoch " +
                                           std::to_string(e),
                                       e);
                adam_net.step(tensors(res.model), tensors(gm), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
                if (stage == 2) {
                    gh.visit([&](const std::string&, Mat& t) { t *= scale; });
                    if (!all_finite(gh))
                        throw NumericError("train_flow: NPV head diverged in stage 2 epoch " + std::to_string(e), e);
                    adam_npv.step(tensors(res.npv), tensors(gh), cfg.npv_lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
                }
            }
            const double n = static_cast<double>(data.size());
            stats.fm /= n;
            stats.kl /= n;
            stats.cov /= n;
            stats.total /= n;
            res.trace.push_back(stats);
            if (on_epoch)
                on_epoch(stats);
        }
    };
    run_stage(1, cfg.stage1_epochs);
    res.stage1_model = res.model;
    run_stage(2, cfg.stage2_epochs);
    return res;
}

// ---------------------------------------------------------------- checkpoints

namespace {

template <class M> json params_json(M& m) {
    json j = json::object();
    m.visit([&](const std::string& name, Mat& t) {
        json data = json::array();
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index c = 0; c < t.cols(); ++c)
                data.push_back(t(r, c));
        j[name] = {{"rows", t.rows()}, {"cols", t.cols()}, {"data", data}};
    });
    return j;
}

template <class M> void load_params(M& m, const json& j) {
    if (!j.is_object())
        throw FormatError("checkpoint: params must be an object");
    m.visit([&](const std::string& name, Mat& t) {
        if (!j.contains(name))
            throw FormatError("checkpoint: missing tensor " + name);
        const json& e = j.at(name);
        if (!e.is_object() || e.value("rows", -1L) != t.rows() || e.value("cols", -1L) != t.cols() ||
            !e.contains("data") || !e.at("data").is_array() ||
            e.at("data").size() != static_cast<std::size_t>(t.size()))
            throw FormatError("checkpoint: tensor " + name + " has the wrong shape");
        std::size_t k = 0;
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index c = 0; c < t.cols(); ++c) {
                const json& v = e.at("data")[k++];
                if (!v.is_number())
                    throw FormatError("checkpoint: tensor " + name + " holds a non-number");
                t(r, c) = v.get<double>();
            }
    });
}

int get_int(const json& j, const char* key) {
    if (!j.contains(key) || !j.at(key).is_number_integer())
        throw FormatError(std::string("checkpoint: missing integer ") + key);
    return j.at(key).get<int>();
}

} // namespace

std::string save_checkpoint(const FlowModel& model, const NpvHead* npv) {
    FlowModel m = model;
    const auto& c = m.cfg;
    json j;
    j["format_version"] = 1;
    j["flow"]["config"] = {{"channels", c.channels}, {"size", c.size},          {"patch", c.patch},
                           {"cond_channels", c.cond_channels}, {"d_model", c.d_model}, {"heads", c.heads},
                           {"blocks", c.blocks}, {"mlp_hidden", c.mlp_hidden}, {"tags", c.tags},
                           {"time_freqs", c.time_freqs}};
    j["flow"]["params"] = params_json(m);
    if (npv) {
        NpvHead h = *npv;
        const auto& n = h.cfg;
        j["npv"]["config"] = {{"channels", n.channels}, {"size", n.size}, {"cond_channels", n.cond_channels},
                              {"features", n.features}, {"groups", n.groups}};
        j["npv"]["params"] = params_json(h);
    } else {
        j["npv"] = nullptr;
    }
    return j.dump() + "\n";
}

std::pair<FlowModel, std::optional<NpvHead>> load_checkpoint(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: invalid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("format_version") || j.at("format_version") != 1)
        throw FormatError("checkpoint: unsupported format_version");
    if (!j.contains("flow") || !j.at("flow").is_object() || !j.at("flow").contains("config"))
        throw FormatError("checkpoint: missing flow section");
    const json& fc = j.at("flow").at("config");
    FlowConfig c;
    c.channels = get_int(fc, "channels");
    c.size = get_int(fc, "size");
    c.patch = get_int(fc, "patch");
    c.cond_channels = get_int(fc, "cond_channels");
    c.d_model = get_int(fc, "d_model");
    c.heads = get_int(fc, "heads");
    c.blocks = get_int(fc, "blocks");
    c.mlp_hidden = get_int(fc, "mlp_hidden");
    c.tags = get_int(fc, "tags");
    c.time_freqs = get_int(fc, "time_freqs");
    try {
        c.validate();
    } catch (const DomainError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    if (c.blocks > 64 || c.d_model > 4096 || c.size > 4096)
        throw FormatError("checkpoint: implausible model size");
    FlowModel m = init_flow_model(c, 0);
    load_params(m, j.at("flow").value("params", json()));
    std::optional<NpvHead> head;
    if (j.contains("npv") && !j.at("npv").is_null()) {
        const json& nc = j.at("npv").at("config");
        NpvConfig n;
        n.channels = get_int(nc, "channels");
        n.size = get_int(nc, "size");
        n.cond_channels = get_int(nc, "cond_channels");
        n.features = get_int(nc, "features");
        n.groups = get_int(nc, "groups");
        try {
            n.validate();
        } catch (const DomainError& e) {
            throw FormatError(std::string("checkpoint: ") + e.what());
        }
        NpvHead h = init_npv_head(n, 0);
        load_params(h, j.at("npv").value("params", json()));
        head = std::move(h);
    }
    return {std::move(m), std::move(head)};
}

} // namespace layervec::flow
