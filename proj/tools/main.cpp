#include "layervec/edit.hpp"
#include "layervec/error.hpp"
#include "layervec/flowlab.hpp"
#include "layervec/image_io.hpp"
#include "layervec/maskio.hpp"
#include "layervec/rasterizer.hpp"
#include "layervec/svgio.hpp"
#include "layervec/vectorize.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using namespace layervec;
using nlohmann::json;

namespace {

constexpr int kExitFormat = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitUsage = 64;
constexpr int kFormatVersion = 1;

std::string g_stage; // prefixes error messages of multi-stage commands

class UsageError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in)
        throw FormatError("cannot read '" + p.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
    if (p.has_parent_path())
        fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out || !(out << text))
        throw FormatError("cannot write '" + p.string() + "'");
}

// Independent per-module streams from one root seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : stream)
        h = (h ^ c) * 1099511628211ull;
    std::uint64_t z = root ^ h;
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

// ---------------------------------------------------------------- configuration

struct Settings {
    std::uint64_t seed = 1;
    int threads = 0;
    vectorize::OptimizeConfig optimize;
    maskio::Thresholds thresholds;
    flow::TrainConfig train;
    int precision = 3;
    int sample_steps = 30;
};

template <class T> void take(const json& j, const char* key, T& dst) {
    if (!j.contains(key))
        return;
    try {
        dst = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw FormatError(std::string("config: bad value for '") + key + "'");
    }
}

void apply_config(Settings& s, const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw FormatError("config '" + path.string() + "': " + e.what());
    }
    if (!j.is_object())
        throw FormatError("config '" + path.string() + "': expected an object");
    take(j, "seed", s.seed);
    take(j, "threads", s.threads);
    take(j, "precision", s.precision);
    if (j.contains("optimize")) {
        const json& o = j["optimize"];
        auto& c = s.optimize;
        take(o, "steps", c.steps);
        take(o, "gamma", c.gamma);
        take(o, "lr_points", c.lr_points);
        take(o, "lr_color", c.lr_color);
        take(o, "simplify_epsilon", c.simplify_epsilon);
        take(o, "max_vertices", c.max_vertices);
        take(o, "max_segments", c.max_segments);
        take(o, "fit_tolerance", c.fit_tolerance);
        take(o, "min_area", c.min_area);
    }
    if (j.contains("render")) {
        const json& r = j["render"];
        take(r, "soft_bandwidth", s.optimize.render.soft_bandwidth);
        take(r, "supersample", s.optimize.render.supersample);
        take(r, "flatten_tolerance", s.optimize.render.flatten_tolerance);
    }
    if (j.contains("thresholds")) {
        const json& t = j["thresholds"];
        take(t, "occlusion", s.thresholds.occlusion);
        take(t, "parent", s.thresholds.parent);
        take(t, "exclusivity", s.thresholds.exclusivity);
    }
    if (j.contains("npv_loss")) {
        const json& l = j["npv_loss"];
        take(l, "beta", s.train.loss.beta);
        take(l, "lambda", s.train.loss.lambda);
        take(l, "patches", s.train.loss.patches);
        take(l, "patch_size", s.train.loss.patch_size);
    }
    if (j.contains("flow")) {
        const json& f = j["flow"];
        take(f, "stage1_epochs", s.train.stage1_epochs);
        take(f, "stage2_epochs", s.train.stage2_epochs);
        take(f, "batch", s.train.batch);
        take(f, "lr", s.train.lr);
        take(f, "npv_lr", s.train.npv_lr);
        take(f, "optimizer", s.train.optimizer);
        take(f, "d_model", s.train.flow.d_model);
        take(f, "heads", s.train.flow.heads);
        take(f, "blocks", s.train.flow.blocks);
        take(f, "mlp_hidden", s.train.flow.mlp_hidden);
        take(f, "features", s.train.npv.features);
        take(f, "sample_steps", s.sample_steps);
    }
}

// CLI flags override config values, which override defaults.
struct Overrides {
    std::vector<std::function<void(Settings&)>> fns;
    std::string config;

    template <class T, class F> void add(CLI::App* app, const std::string& name, const std::string& help, F setter) {
        auto value = std::make_shared<T>();
        CLI::Option* opt = app->add_option(name, *value, help);
        fns.push_back([opt, value, setter](Settings& s) {
            if (opt->count())
                setter(s, *value);
        });
    }

    Settings resolve() const {
        Settings s;
        if (!config.empty())
            apply_config(s, config);
        for (const auto& f : fns)
            f(s);
        return s;
    }
};

void add_common(CLI::App* app, Overrides& o) {
    app->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    o.add<std::uint64_t>(app, "--seed", "root random seed", [](Settings& s, std::uint64_t v) { s.seed = v; });
    o.add<int>(app, "--threads", "worker threads (0 = all cores)", [](Settings& s, int v) { s.threads = v; });
}

void add_optimize(CLI::App* app, Overrides& o) {
    o.add<int>(app, "--steps", "optimization steps", [](Settings& s, int v) { s.optimize.steps = v; });
    o.add<double>(app, "--gamma", "mask-loss weight", [](Settings& s, double v) { s.optimize.gamma = v; });
    o.add<double>(app, "--lr-points", "point step size (px)", [](Settings& s, double v) { s.optimize.lr_points = v; });
    o.add<double>(app, "--lr-color", "colour step size", [](Settings& s, double v) { s.optimize.lr_color = v; });
    o.add<double>(app, "--tau-occ", "occlusion threshold", [](Settings& s, double v) { s.thresholds.occlusion = v; });
    o.add<double>(app, "--tau-parent", "parent threshold", [](Settings& s, double v) { s.thresholds.parent = v; });
    o.add<int>(app, "--precision", "SVG decimal places", [](Settings& s, int v) { s.precision = v; });
}

void check_settings(const Settings& s) {
    if (s.threads < 0)
        throw UsageError("--threads must be >= 0");
    if (s.optimize.steps < 0)
        throw UsageError("--steps must be >= 0");
    if (s.precision < 0 || s.precision > 12)
        throw UsageError("--precision must lie in [0, 12]");
}

// ---------------------------------------------------------------- shared stages

struct Vectorized {
    VectorDocument doc;
    maskio::MaskHierarchy hierarchy;
    std::vector<double> trace;
    vectorize::StructureLoss final_loss;
};

RasterImage as_rgb(const RasterImage& img) {
    if (img.channels == 3)
        return img;
    RasterImage out(img.width, img.height, 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(x, y, c) = img.at(x, y, 0);
    return out;
}

Vectorized run_vectorize(const RasterImage& image, const fs::path& masks, const Settings& s) {
    g_stage = "masks";
    const maskio::RawMaskStack stack = maskio::load_mask_stack(masks);
    if (stack.width != image.width || stack.height != image.height)
        throw FormatError("mask stack is " + std::to_string(stack.width) + "x" + std::to_string(stack.height) +
                          " but the image is " + std::to_string(image.width) + "x" + std::to_string(image.height));
    Vectorized v;
    v.hierarchy = maskio::link_parents(maskio::assign_masks_to_layers(stack, s.thresholds.occlusion),
                                       s.thresholds.parent);
    g_stage = "init";
    vectorize::OptimizeConfig cfg = s.optimize;
    cfg.render.threads = s.threads;
    const VectorDocument init = vectorize::init_document(image, v.hierarchy, cfg);
    g_stage = "optimize";
    auto result = vectorize::optimize(init, v.hierarchy, image, cfg,
                                      [&](int, const vectorize::StructureLoss& l) { v.final_loss = l; });
    v.doc = std::move(result.doc);
    v.trace = std::move(result.trace);
    g_stage.clear();
    return v;
}

std::string trace_csv(const std::vector<double>& trace) {
    std::string out = "format_version,step,total\n";
    for (std::size_t i = 0; i < trace.size(); ++i)
        out += std::to_string(kFormatVersion) + "," + std::to_string(i) + "," + num(trace[i]) + "\n";
    return out;
}

void save_image(const fs::path& p, const RasterImage& img) {
    if (p.has_parent_path())
        fs::create_directories(p.parent_path());
    write_image(p, img);
}

VectorDocument load_svg(const fs::path& p) {
    auto r = svg::parse_svg_with_warnings(read_file(p));
    for (const auto& w : r.warnings)
        std::cerr << "warning: " << p.string() << ":" << w.offset << ": " << w.message << "\n";
    return std::move(r.doc);
}

std::string save_svg(const VectorDocument& doc, const Settings& s) {
    svg::Dialect d;
    d.precision = s.precision;
    return svg::write_svg(doc, d);
}

raster::RenderParams render_params(const Settings& s) {
    raster::RenderParams p = s.optimize.render;
    p.threads = s.threads;
    return p;
}

// ---------------------------------------------------------------- vectorize / render / edit

int cmd_vectorize(const Settings& s, const fs::path& image_path, const fs::path& masks, const fs::path& out,
                  const std::string& trace, const std::string& preview) {
    g_stage = "image";
    const RasterImage image = as_rgb(read_png(image_path));
    const Vectorized v = run_vectorize(image, masks, s);
    write_file(out, save_svg(v.doc, s));
    if (!trace.empty())
        write_file(trace, trace_csv(v.trace));
    if (!preview.empty())
        save_image(preview, raster::render(v.doc, render_params(s)));
    std::cout << "regions " << node_count(v.doc) << "  loss " << num(v.trace.front()) << " -> "
              << num(v.trace.back()) << "\n";
    return 0;
}

int cmd_render(const Settings& s, const fs::path& in, const fs::path& out, int size) {
    const VectorDocument doc = load_svg(in);
    raster::RenderSize rs{doc.width, doc.height};
    if (size > 0) {
        rs.width = size;
        rs.height = std::max(1, static_cast<int>(std::lround(static_cast<double>(size) * doc.height / doc.width)));
    }
    save_image(out, raster::render(doc, render_params(s), rs));
    return 0;
}

bool g_shallow = false;

std::vector<edit::EditOp> load_script(const fs::path& p) {
    auto ops = edit::parse_edit_script(read_file(p));
    if (g_shallow)
        for (auto& op : ops)
            op.shallow = true;
    return ops;
}

int cmd_edit(const Settings& s, const fs::path& in, const fs::path& ops, const fs::path& out) {
    const VectorDocument doc = load_svg(in);
    const VectorDocument edited = edit::apply_edit_script(doc, load_script(ops));
    write_file(out, save_svg(edited, s));
    return 0;
}

// ---------------------------------------------------------------- roundtrip

int cmd_roundtrip(const Settings& s, const fs::path& in, const fs::path& masks, const std::string& ops,
                  const fs::path& dir) {
    g_stage = "parse";
    const VectorDocument source = load_svg(in);
    g_stage = "render";
    const auto params = render_params(s);
    const RasterImage image = raster::render(source, params);
    save_image(dir / "rendered.png", image);

    const Vectorized v = run_vectorize(image, masks, s);
    write_file(dir / "trace.csv", trace_csv(v.trace));

    g_stage = "edit";
    const std::vector<edit::EditOp> script = ops.empty() ? std::vector<edit::EditOp>{} : load_script(ops);
    const std::string vec_text = save_svg(v.doc, s);
    write_file(dir / "vectorized.svg", vec_text);
    const VectorDocument base = svg::parse_svg(vec_text);
    const VectorDocument edited = edit::apply_edit_script(base, script);
    const std::string edited_text = save_svg(edited, s);
    write_file(dir / "edited.svg", edited_text);

    g_stage = "render";
    const RasterImage rerender = raster::render(base, params);
    const RasterImage edited_image = raster::render(svg::parse_svg(edited_text), params);
    save_image(dir / "edited.png", edited_image);

    const auto diff = svg::diff_documents(base, edited);
    std::map<svg::Change, int> counts;
    for (const auto& d : diff)
        ++counts[d.kind];
    const double p = psnr(image, rerender);
    std::string csv = "format_version,psnr_db,structure_loss,recon_loss,regions,unchanged,moved,recolored,reshaped,"
                      "added,removed\n";
    csv += std::to_string(kFormatVersion) + "," + num(p) + "," + num(v.trace.back()) + "," + num(v.final_loss.recon) +
           "," + std::to_string(node_count(v.doc));
    for (auto k : {svg::Change::unchanged, svg::Change::moved, svg::Change::recolored, svg::Change::reshaped,
                   svg::Change::added, svg::Change::removed})
        csv += "," + std::to_string(counts[k]);
    csv += "\n";
    write_file(dir / "metrics.csv", csv);
    g_stage.clear();
    std::cout << "psnr " << num(p) << " dB  structure loss " << num(v.trace.back()) << "\n";
    return 0;
}

// ---------------------------------------------------------------- validate-masks

int cmd_validate_masks(const Settings& s, const fs::path& masks) {
    const auto stack = maskio::load_mask_stack(masks);
    const auto h = maskio::link_parents(maskio::assign_masks_to_layers(stack, s.thresholds.occlusion),
                                        s.thresholds.parent);
    const auto violations = maskio::validate_hierarchy(h, s.thresholds);
    for (const auto& layer : h.layers)
        std::cout << "layer " << layer.level_index << ": " << layer.masks.size() << " masks\n";
    for (const auto& v : violations)
        std::cout << "violation " << v.mask_id << ": " << v.message << "\n";
    if (!violations.empty()) {
        std::cerr << "error: " << violations.size() << " hierarchy violation(s)\n";
        return kExitFormat;
    }
    std::cout << "ok\n";
    return 0;
}

// ---------------------------------------------------------------- flow

struct ToySet {
    std::vector<flow::FlowItem> items;
    std::vector<std::string> files;
};

ToySet load_toy_set(const fs::path& dir, int size) {
    const fs::path manifest = dir / "manifest.json";
    json j;
    try {
        j = json::parse(read_file(manifest));
    } catch (const json::exception& e) {
        throw FormatError("'" + manifest.string() + "': " + e.what());
    }
    if (!j.is_object() || j.value("format_version", 0) != kFormatVersion || !j.contains("items") ||
        !j["items"].is_array())
        throw FormatError("'" + manifest.string() + "': expected {format_version:1, items:[...]}");
    ToySet set;
    for (const auto& e : j["items"]) {
        if (!e.is_object() || !e.contains("svg") || !e["svg"].is_string() || !e.contains("tag") ||
            !e["tag"].is_number_integer())
            throw FormatError("'" + manifest.string() + "': items need {svg, tag}");
        const std::string file = e["svg"].get<std::string>();
        set.items.push_back(flow::item_from_document(load_svg(dir / file), e["tag"].get<int>(), size));
        set.files.push_back(file);
    }
    if (set.items.empty())
        throw FormatError("'" + manifest.string() + "': no items");
    return set;
}

int cmd_flow_make_toy(const Settings& s, const fs::path& dir, int count) {
    if (count < 1)
        throw UsageError("--count must be >= 1");
    const auto docs = flow::make_toy_documents(derive_seed(s.seed, "flow.toy"), count);
    json items = json::array();
    for (std::size_t i = 0; i < docs.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "item_%03zu.svg", i);
        write_file(dir / name, save_svg(docs[i].first, s));
        items.push_back({{"svg", name}, {"tag", docs[i].second}});
    }
    write_file(dir / "manifest.json", json{{"format_version", kFormatVersion}, {"items", items}}.dump(1) + "\n");
    return 0;
}

int cmd_flow_train(Settings s, const fs::path& data, const fs::path& out, const std::string& loss_csv, int holdout,
                   const std::string& report) {
    flow::TrainConfig cfg = s.train;
    cfg.seed = derive_seed(s.seed, "flow.train");
    ToySet set = load_toy_set(data, cfg.flow.size);
    if (holdout < 0 || static_cast<std::size_t>(holdout) >= set.items.size())
        throw UsageError("--holdout must leave at least one training item");
    std::vector<flow::FlowItem> train(set.items.begin(), set.items.end() - holdout);
    std::vector<flow::FlowItem> held(set.items.end() - holdout, set.items.end());

    std::string csv = "format_version,stage,epoch,fm,kl,cov,total\n";
    const auto result = flow::train_flow(train, cfg, [&](const flow::EpochStats& e) {
        csv += std::to_string(kFormatVersion) + "," + std::to_string(e.stage) + "," + std::to_string(e.epoch) + "," +
               num(e.fm) + "," + num(e.kl) + "," + num(e.cov) + "," + num(e.total) + "\n";
    });
    write_file(out, flow::save_checkpoint(result.model, &result.npv));
    if (!loss_csv.empty())
        write_file(loss_csv, csv);
    if (!held.empty()) {
        const std::uint64_t seed = derive_seed(s.seed, "flow.eval");
        const double base = flow::sampling_mse(result.stage1_model, nullptr, held, s.sample_steps, seed);
        const double npv = flow::sampling_mse(result.model, &result.npv, held, s.sample_steps, seed);
        std::cout << "held-out sampling mse: stage1 " << num(base) << "  npv " << num(npv) << "\n";
        if (!report.empty())
            write_file(report, "format_version,items,steps,stage1_mse,npv_mse\n" + std::to_string(kFormatVersion) +
                                   "," + std::to_string(held.size()) + "," + std::to_string(s.sample_steps) + "," +
                                   num(base) + "," + num(npv) + "\n");
    }
    return 0;
}

RasterImage latent_to_image(const flow::Latent& z) {
    RasterImage img(z.width, z.height, 3);
    for (int y = 0; y < z.height; ++y)
        for (int x = 0; x < z.width; ++x) {
            const double g = (z.at(0, y, x) + 1.0) / 2.0;
            const double d = z.channels > 1 ? z.at(1, y, x) / 2.0 : 0.0;
            img.at(x, y, 0) = std::clamp(g + d / 2.0, 0.0, 1.0);
            img.at(x, y, 1) = std::clamp(g, 0.0, 1.0);
            img.at(x, y, 2) = std::clamp(g - d / 2.0, 0.0, 1.0);
        }
    return img;
}

int cmd_flow_sample(const Settings& s, const fs::path& ckpt, const fs::path& cond_svg, int tag, int steps,
                    const fs::path& out, const std::string& latent_out, bool no_npv) {
    if (steps < 1)
        throw UsageError("--steps must be >= 1");
    auto [model, head] = flow::load_checkpoint(read_file(ckpt));
    const flow::FlowItem item = flow::item_from_document(load_svg(cond_svg), tag, model.cfg.size);
    const flow::Latent eps =
        flow::gaussian_latent(model.cfg.channels, model.cfg.size, model.cfg.size, derive_seed(s.seed, "flow.sample"));
    const flow::NpvHead* npv = (head && !no_npv) ? &*head : nullptr;
    const flow::Latent z = flow::sample(model, flow::initial_noise(npv, item, eps), item.cond, tag, steps);
    save_image(out, latent_to_image(z));
    if (!latent_out.empty()) {
        json j{{"format_version", kFormatVersion},
               {"channels", z.channels},
               {"height", z.height},
               {"width", z.width},
               {"data", std::vector<double>(z.data.data(), z.data.data() + z.data.size())}};
        write_file(latent_out, j.dump() + "\n");
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"layervec: layered image vectorization, SVG editing and a flow-matching lab"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);
    Overrides o;
    std::string image, masks, svg_in, out, trace, preview, ops, dir, data, ckpt, loss_csv, report, latent_out;
    int size = 0, count = 64, holdout = 16, tag = 0;
    std::optional<int> steps_flag;
    bool no_npv = false;

    auto* vec = app.add_subcommand("vectorize", "raster + mask stack -> layered SVG");
    vec->add_option("--image", image, "input PNG")->required();
    vec->add_option("--masks", masks, "mask-stack directory (manifest.json)")->required();
    vec->add_option("--out", out, "output SVG")->required();
    vec->add_option("--trace", trace, "loss trace CSV");
    vec->add_option("--preview", preview, "render of the result");
    add_common(vec, o);
    add_optimize(vec, o);

    auto* ren = app.add_subcommand("render", "SVG -> PNG/PPM");
    ren->add_option("--svg", svg_in, "input SVG")->required();
    ren->add_option("--out", out, "output image")->required();
    ren->add_option("--size", size, "output width; height keeps the aspect ratio")->check(CLI::PositiveNumber);
    add_common(ren, o);

    auto* ed = app.add_subcommand("edit", "apply a JSON edit script to an SVG");
    ed->add_option("--svg", svg_in, "input SVG")->required();
    ed->add_option("--ops", ops, "edit script JSON")->required();
    ed->add_option("--out", out, "output SVG")->required();
    ed->add_flag("--shallow", g_shallow, "transforms and removals skip descendants");
    add_common(ed, o);
    o.add<int>(ed, "--precision", "SVG decimal places", [](Settings& s, int v) { s.precision = v; });

    auto* rt = app.add_subcommand("roundtrip", "SVG -> render -> vectorize -> edit -> render, with metrics");
    rt->add_option("--svg", svg_in, "input SVG")->required();
    rt->add_option("--masks", masks, "mask stack for the rendered image")->required();
    rt->add_option("--ops", ops, "edit script JSON (default: empty)");
    rt->add_option("--out-dir", dir, "artifact directory")->required();
    rt->add_flag("--shallow", g_shallow, "transforms and removals skip descendants");
    add_common(rt, o);
    add_optimize(rt, o);

    auto* vm = app.add_subcommand("validate-masks", "check a mask stack against the hierarchy rules");
    vm->add_option("--masks", masks, "mask-stack directory")->required();
    add_common(vm, o);
    o.add<double>(vm, "--tau-occ", "occlusion threshold", [](Settings& s, double v) { s.thresholds.occlusion = v; });
    o.add<double>(vm, "--tau-parent", "parent threshold", [](Settings& s, double v) { s.thresholds.parent = v; });
    o.add<double>(vm, "--tau-excl", "exclusivity threshold",
                  [](Settings& s, double v) { s.thresholds.exclusivity = v; });

    auto* fl = app.add_subcommand("flow", "flow-matching lab");
    fl->require_subcommand(1);
    auto* toy = fl->add_subcommand("make-toy", "generate the toy SVG dataset");
    toy->add_option("--out-dir", dir, "output directory")->required();
    toy->add_option("--count", count, "number of documents");
    add_common(toy, o);
    o.add<int>(toy, "--precision", "SVG decimal places", [](Settings& s, int v) { s.precision = v; });

    auto* tr = fl->add_subcommand("train", "two-stage training (flow, then NPV)");
    tr->add_option("--data", data, "toy dataset directory")->required();
    tr->add_option("--out", out, "checkpoint JSON")->required();
    tr->add_option("--loss-csv", loss_csv, "per-epoch loss CSV");
    tr->add_option("--holdout", holdout, "trailing items kept out of training");
    tr->add_option("--report", report, "held-out sampling MSE CSV");
    add_common(tr, o);
    o.add<int>(tr, "--stage1-epochs", "stage-1 epochs", [](Settings& s, int v) { s.train.stage1_epochs = v; });
    o.add<int>(tr, "--stage2-epochs", "stage-2 epochs", [](Settings& s, int v) { s.train.stage2_epochs = v; });
    o.add<double>(tr, "--lr", "velocity-net learning rate", [](Settings& s, double v) { s.train.lr = v; });
    o.add<double>(tr, "--npv-lr", "NPV-head learning rate", [](Settings& s, double v) { s.train.npv_lr = v; });
    o.add<int>(tr, "--batch", "minibatch size", [](Settings& s, int v) { s.train.batch = v; });
    o.add<std::string>(tr, "--optimizer", "optimizer (adam)", [](Settings& s, std::string v) { s.train.optimizer = v; });
    o.add<int>(tr, "--eval-steps", "Euler steps for held-out evaluation", [](Settings& s, int v) { s.sample_steps = v; });

    auto* sa = fl->add_subcommand("sample", "Euler sampling from a checkpoint");
    sa->add_option("--checkpoint", ckpt, "checkpoint JSON")->required();
    sa->add_option("--svg", svg_in, "condition SVG")->required();
    sa->add_option("--tag", tag, "text tag");
    sa->add_option("--out", out, "output image")->required();
    sa->add_option("--latent", latent_out, "raw latent JSON");
    sa->add_flag("--no-npv", no_npv, "start from N(0, I) even when the checkpoint has an NPV head");
    o.add<int>(sa, "--steps", "Euler steps (>= 1)", [](Settings& s, int v) { s.sample_steps = v; });
    add_common(sa, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        const Settings s = o.resolve();
        check_settings(s);
        if (*vec)
            return cmd_vectorize(s, image, masks, out, trace, preview);
        if (*ren)
            return cmd_render(s, svg_in, out, size);
        if (*ed)
            return cmd_edit(s, svg_in, ops, out);
        if (*rt)
            return cmd_roundtrip(s, svg_in, masks, ops, dir);
        if (*vm)
            return cmd_validate_masks(s, masks);
        if (*toy)
            return cmd_flow_make_toy(s, dir, count);
        if (*tr)
            return cmd_flow_train(s, data, out, loss_csv, holdout, report);
        if (*sa)
            return cmd_flow_sample(s, ckpt, svg_in, tag, s.sample_steps, out, latent_out, no_npv);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << (g_stage.empty() ? "" : g_stage + ": ") << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << (g_stage.empty() ? "" : g_stage + ": ") << e.what() << "\n";
        return kExitFormat;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    }
    return kExitUsage;
}
