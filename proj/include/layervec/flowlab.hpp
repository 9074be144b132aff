#pragma once

#include "layervec/document.hpp"
#include "layervec/image.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace layervec::flow {

using Mat = Eigen::MatrixXd;

// C × h × w grid, stored channel-major: index (c·h + y)·w + x.
struct Latent {
    int channels = 0;
    int height = 0;
    int width = 0;
    Eigen::VectorXd data;

    Latent() = default;
    Latent(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w), data(Eigen::VectorXd::Constant(static_cast<Eigen::Index>(c) * h * w, fill)) {}

    Eigen::Index index(int c, int y, int x) const { return (static_cast<Eigen::Index>(c) * height + y) * width + x; }
    double& at(int c, int y, int x) { return data[index(c, y, x)]; }
    double at(int c, int y, int x) const { return data[index(c, y, x)]; }
    Eigen::Index size() const { return data.size(); }
    bool same_shape(const Latent& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
};

// ---------------------------------------------------------------- flow matching

// z_t = (1−t)·z1 + t·z0; t = 0 is the noise end, t = 1 the data end.
Latent interpolate(const Latent& z0, const Latent& z1, double t);

// mean((v − (z0 − z1))²)
double fm_loss(const Latent& v_pred, const Latent& z0, const Latent& z1);

// ---------------------------------------------------------------- attention

struct MmaWeights {
    Mat wq, wk, wv; // d × d
    int heads = 1;
};

struct MmaResult {
    Mat text, latent, cond;      // rows split back by role
    std::vector<Mat> attention;  // per head, (n × n) softmax weights
};

// One softmax attention over the concatenation [text; latent; cond].
// Throws FormatError on width mismatch or heads not dividing d.
MmaResult mma_attention(const Mat& text, const Mat& latent, const Mat& cond, const MmaWeights& w);

// ---------------------------------------------------------------- velocity network

struct FlowConfig {
    int channels = 2;      // latent C
    int size = 16;         // latent h = w
    int patch = 4;         // latent cells per token side
    int cond_channels = 3; // RGB condition raster at latent resolution
    int d_model = 32;
    int heads = 2;
    int blocks = 1;
    int mlp_hidden = 64;
    int tags = 4;       // text-tag vocabulary
    int time_freqs = 4; // sinusoidal features 2·time_freqs

    int grid() const { return size / patch; }
    int tokens() const { return grid() * grid(); }
    int latent_features() const { return channels * patch * patch; }
    int cond_features() const { return cond_channels * patch * patch; }
    void validate() const;
};

struct Block {
    Mat wq, wk, wv, wo;
    Mat w1, b1, w2, b2;
};

// Token transformer: one tag token, latent patch tokens (plus time and
// position embeddings) and condition patch tokens; MMA + MLP residual
// blocks; a linear head maps latent tokens back to velocity patches.
struct FlowModel {
    FlowConfig cfg;
    Mat wz, bz, wc, bc, wt, bt, pos_z, pos_c, tag;
    std::vector<Block> blocks;
    Mat wout, bout;

    // Every parameter tensor in a fixed order.
    template <class F> void visit(F&& f) {
        f("wz", wz); f("bz", bz); f("wc", wc); f("bc", bc); f("wt", wt); f("bt", bt);
        f("pos_z", pos_z); f("pos_c", pos_c); f("tag", tag);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "block" + std::to_string(i) + ".";
            auto& b = blocks[i];
            f(p + "wq", b.wq); f(p + "wk", b.wk); f(p + "wv", b.wv); f(p + "wo", b.wo);
            f(p + "w1", b.w1); f(p + "b1", b.b1); f(p + "w2", b.w2); f(p + "b2", b.b2);
        }
        f("wout", wout); f("bout", bout);
    }
};

FlowModel init_flow_model(const FlowConfig& cfg, std::uint64_t seed);
FlowModel zeros_like(const FlowModel& m);

struct FlowInput {
    const Latent* z = nullptr;           // z_t
    double t = 0.0;
    const RasterImage* cond = nullptr;   // cond_channels × size × size
    int tag = 0;
};

Latent velocity(const FlowModel& m, const FlowInput& in);

// Forward plus reverse pass for loss = Σ dv ⊙ v. Accumulates parameter
// gradients into `grad` and returns d/dz.
Latent velocity_backward(const FlowModel& m, const FlowInput& in, const Latent& dv, FlowModel& grad);

// ---------------------------------------------------------------- NPV head

struct NpvConfig {
    int channels = 2;      // latent C
    int size = 16;         // latent side
    int cond_channels = 3;
    int features = 8;      // encoder width
    int groups = 2;        // GroupNorm groups
    void validate() const;
};

// conv3×3 → SiLU → conv3×3 → φ = GroupNorm + SiLU → parallel 1×1 heads.
struct NpvHead {
    NpvConfig cfg;
    Mat w1, b1, w2, b2, gamma, beta, w_mu, b_mu, w_lv, b_lv;

    template <class F> void visit(F&& f) {
        f("w1", w1); f("b1", b1); f("w2", w2); f("b2", b2); f("gamma", gamma); f("beta", beta);
        f("w_mu", w_mu); f("b_mu", b_mu); f("w_lv", w_lv); f("b_lv", b_lv);
    }
};

// Output heads start at zero, so a fresh head yields μ = 0, log σ² = 0.
NpvHead init_npv_head(const NpvConfig& cfg, std::uint64_t seed);
NpvHead zeros_like(const NpvHead& h);

struct NpvOutput {
    Latent mu;
    Latent logvar; // clamped to [−10, 10]
};

// `cond` may be an integer multiple of the latent size; it is box-averaged
// down first. Throws FormatError on any other size.
NpvOutput npv_forward(const NpvHead& head, const RasterImage& cond);

// Reverse pass for loss = Σ dmu ⊙ μ + Σ dlogvar ⊙ log σ²; accumulates into `grad`.
void npv_backward(const NpvHead& head, const RasterImage& cond, const Latent& dmu, const Latent& dlogvar,
                  NpvHead& grad);

// ---------------------------------------------------------------- NPV losses

// μ + exp(log σ² / 2) ⊙ ε
Latent reparameterize(const Latent& mu, const Latent& logvar, const Latent& eps);

// mean(½(μ² + σ² − log σ² − 1)); optional gradients.
double kl_loss(const Latent& mu, const Latent& logvar, Latent* dmu = nullptr, Latent* dlogvar = nullptr);

struct NpvLossConfig {
    double beta = 1.0;
    double lambda = 1.0;
    int patches = 8192;  // N, capped at 4 × the number of window positions
    int patch_size = 4;  // p
    void validate(const Latent& mu) const;
};

// Mean over N seeded p×p windows of (1/(C(C−1)))·Σ_{i≠j} R_ij², R the
// correlation of the C row-centred, unit-normalised channel vectors. A
// constant channel contributes zero correlation. Throws DomainError for C < 2.
double cov_loss(const Latent& mu, const NpvLossConfig& cfg, std::uint64_t seed, Latent* dmu = nullptr);

int effective_patches(const Latent& mu, const NpvLossConfig& cfg);

double total_loss(double fm, double kl, double cov, const NpvLossConfig& cfg);

// ---------------------------------------------------------------- sampling

using VelocityField = std::function<Latent(const Latent& z, double t)>;

// Euler from t = 0 (init, noise end) to t = 1 in `steps` equal steps.
// Throws DomainError for steps < 1, NumericError with the step index on a
// non-finite state.
Latent euler_sample(const Latent& init, int steps, const VelocityField& v);

Latent sample(const FlowModel& m, const Latent& init, const RasterImage& cond, int tag, int steps);

// ---------------------------------------------------------------- data and training

struct FlowItem {
    Latent target;     // z0
    RasterImage cond;  // RGB at latent resolution
    int tag = 0;
};

// Two latent channels from an RGB raster: 2·gray − 1 and 2·(R − B).
Latent latent_from_image(const RasterImage& rgb);

// Render at size·oversample, box-filter to size; target = latent_from_image.
FlowItem item_from_document(const VectorDocument& doc, int tag, int size, int oversample = 4);

// 1–3 flat shapes (ellipses, rectangles) on a tinted background; tag = shape
// count − 1 (+1 when the largest shape is an ellipse, capped at 3).
std::vector<std::pair<VectorDocument, int>> make_toy_documents(std::uint64_t seed, int count, int canvas = 64);

struct TrainConfig {
    FlowConfig flow;
    NpvConfig npv;
    NpvLossConfig loss;
    int stage1_epochs = 200;
    int stage2_epochs = 200;
    int batch = 8;
    double lr = 2e-3;
    double npv_lr = 2e-3;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::string optimizer = "adam"; // only Adam is implemented
    std::uint64_t seed = 1;
};

struct EpochStats {
    int stage = 1;
    int epoch = 0;
    double fm = 0.0, kl = 0.0, cov = 0.0, total = 0.0;
};

struct TrainResult {
    FlowModel model;
    NpvHead npv;
    std::vector<EpochStats> trace;
    FlowModel stage1_model; // snapshot after stage 1
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Stage 1: velocity net only, z1 ~ N(0, I). Stage 2: net and NPV head
// jointly on fm + β·kl + λ·cov with z1 = reparameterize(npv(cond), ε).
// Throws FormatError on an empty dataset, NumericError naming stage and
// epoch when the loss diverges.
TrainResult train_flow(const std::vector<FlowItem>& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Stage-2 style loss of one item and its gradients (used by training and
// gradient checks). `npv` may be null for stage 1.
struct StepLoss {
    double fm = 0.0, kl = 0.0, cov = 0.0, total = 0.0;
};
StepLoss item_loss(const FlowModel& m, const NpvHead* npv, const FlowItem& item, const Latent& eps, double t,
                   const NpvLossConfig& loss, std::uint64_t cov_seed, FlowModel* gm, NpvHead* gh);

// Initial noise for sampling: ε, or reparameterize(npv(cond), ε) with a head.
Latent initial_noise(const NpvHead* npv, const FlowItem& item, const Latent& eps);

// Mean squared error of Euler samples against targets, one ε per item drawn
// from `seed`.
double sampling_mse(const FlowModel& m, const NpvHead* npv, const std::vector<FlowItem>& items, int steps,
                    std::uint64_t seed);

Latent gaussian_latent(int c, int h, int w, std::uint64_t seed);

// ---------------------------------------------------------------- checkpoints

// {"format_version":1, "flow":{config, params}, "npv":{config, params}}.
std::string save_checkpoint(const FlowModel& m, const NpvHead* npv);
std::pair<FlowModel, std::optional<NpvHead>> load_checkpoint(const std::string& json_text);

} // namespace layervec::flow
