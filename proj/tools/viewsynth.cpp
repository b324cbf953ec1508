// Command-line surface: dataset generation, training, evaluation, single-image
// translation, continuous view interpolation, per-stage flow rendering, and
// the gradient-check runner.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "vsyn/eval.hpp"
#include "vsyn/flowviz.hpp"
#include "vsyn/gradsuite.hpp"
#include "vsyn/train.hpp"

using namespace vsyn;
namespace fs = std::filesystem;

namespace {

TrainConfig build_config(const std::string& config_path,
                         const std::vector<std::string>& overrides) {
    TrainConfig cfg;
    if (!config_path.empty())
        for (const auto& [k, v] : parse_kv_file(config_path)) cfg.apply(k, v);
    for (const auto& kv : overrides) {
        auto eq = kv.find('=');
        require(eq != std::string::npos, "override must be key=value, got: " + kv);
        cfg.apply(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

ModelT<float> load_model(const std::string& checkpoint_path, TrainConfig* out_cfg = nullptr) {
    TrainConfig cfg = checkpoint_config(checkpoint_path);
    ModelT<float> model(cfg.model);
    load_checkpoint(checkpoint_path, model);
    if (out_cfg) *out_cfg = cfg;
    return model;
}

Tensor load_image_tensor(const std::string& path) {
    ImageU8 img = read_png(path);
    require(img.width == 64 && img.height == 64,
            "expected a 64x64 image, got " + std::to_string(img.width) + "x" +
                std::to_string(img.height) + " in " + path);
    return Tensor::from_data({1, 3, 64, 64}, from_u8(img));
}

ImageU8 hcat(const std::vector<ImageU8>& panels) {
    int w = 0, h = 0;
    for (const auto& p : panels) {
        w += p.width;
        h = std::max(h, p.height);
    }
    ImageU8 out;
    out.width = w;
    out.height = h;
    out.rgb.assign(static_cast<size_t>(3) * w * h, 255);
    int xoff = 0;
    for (const auto& p : panels) {
        for (int y = 0; y < p.height; y++)
            for (int x = 0; x < p.width; x++)
                for (int c = 0; c < 3; c++)
                    out.rgb[(static_cast<size_t>(y) * w + xoff + x) * 3 + c] =
                        p.rgb[(static_cast<size_t>(y) * p.width + x) * 3 + c];
        xoff += p.width;
    }
    return out;
}

ImageU8 tensor_panel(const Tensor& t, int64_t batch = 0) {
    const Shape4 s = t.shape();
    return to_u8(t.data().data() + batch * s.c * s.hw(), static_cast<int>(s.h),
                 static_cast<int>(s.w));
}

ImageU8 mask_panel(const Tensor& mask) {
    // single channel in (0,1) mapped to grayscale bytes
    const Shape4 s = mask.shape();
    ImageU8 img;
    img.width = static_cast<int>(s.w);
    img.height = static_cast<int>(s.h);
    img.rgb.resize(static_cast<size_t>(3) * s.hw());
    for (int64_t i = 0; i < s.hw(); i++) {
        const auto v = static_cast<uint8_t>(std::lround(mask.data()[i] * 255.f));
        img.rgb[i * 3] = img.rgb[i * 3 + 1] = img.rgb[i * 3 + 2] = v;
    }
    return img;
}

ImageU8 upscale_nearest_u8(const ImageU8& img, int factor) {
    ImageU8 out;
    out.width = img.width * factor;
    out.height = img.height * factor;
    out.rgb.resize(static_cast<size_t>(3) * out.width * out.height);
    for (int y = 0; y < out.height; y++)
        for (int x = 0; x < out.width; x++)
            for (int c = 0; c < 3; c++)
                out.rgb[(static_cast<size_t>(y) * out.width + x) * 3 + c] =
                    img.rgb[(static_cast<size_t>(y / factor) * img.width + x / factor) * 3 + c];
    return out;
}

GeneratorOutputT<float> translate_once(ModelT<float>& model, const Tensor& x, int from, int to_v,
                                       const Tensor* soft_target = nullptr) {
    NoGradGuard ng;
    const int K = model.cfg.num_views;
    auto enc = model.encoder.forward(x);
    Tensor oh_a = onehot_labels<float>({{from, K}});
    Tensor oh_b = soft_target ? *soft_target : onehot_labels<float>({{to_v, K}});
    return model.generator.forward(x, enc, enc.mu, oh_a, oh_b);
}

int cmd_gen_data(int sprites, const std::string& out, uint64_t seed, int size, bool save_flows) {
    DatasetManifest m = generate_dataset(sprites, out, seed, size);
    std::cout << "wrote " << sprites * m.num_views << " images to " << out << " ("
              << m.train_count() << " train / " << m.test_count() << " test sprites)\n";
    if (save_flows) {
        CheckpointWriter w(out + "/flows.idu");
        for (int i = 0; i < sprites; i++) {
            SpriteSpec spec = SpriteSpec::from_seed(m.sprite_seeds[i]);
            for (int a = 0; a < m.num_views; a++)
                for (int b = 0; b < m.num_views; b++) {
                    if (a == b) continue;
                    GtFlow f = gt_flow(spec, a, b, size);
                    std::vector<float> field;
                    field.insert(field.end(), f.dx.begin(), f.dx.end());
                    field.insert(field.end(), f.dy.begin(), f.dy.end());
                    w.add("flow/" + std::to_string(m.sprite_seeds[i]) + "/" + std::to_string(a) +
                              ">" + std::to_string(b),
                          Shape4{1, 2, size, size}, field.data());
                }
        }
        std::cout << "wrote analytic flow archive to " << out << "/flows.idu\n";
    }
    return 0;
}

int cmd_train(TrainConfig cfg, bool resume) {
    require(!cfg.dataset.empty(), "train: dataset path required (key 'dataset')");
    enable_flush_denormals();
    set_blas_threads(cfg.threads);
    DatasetManifest manifest = load_manifest(cfg.dataset);
    Trainer trainer(cfg, manifest);
    const std::string ckpt = cfg.out_dir + "/checkpoint.idu";
    if (resume) {
        require(fs::exists(ckpt), "resume requested but no checkpoint at " + ckpt);
        trainer.resume(ckpt);
        std::cout << "resumed at step " << trainer.step() << "\n";
    }
    std::ofstream cfg_out(cfg.out_dir + "/config.txt");
    cfg_out << cfg.serialize();
    cfg_out.close();
    trainer.run(&std::cout);
    std::cout << "done: " << trainer.step() << " steps, checkpoint at " << ckpt << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& out,
             int max_sprites, int threads) {
    enable_flush_denormals();
    set_blas_threads(threads);
    TrainConfig cfg;
    ModelT<float> model = load_model(checkpoint, &cfg);
    DatasetManifest manifest = load_manifest(dataset);
    EvalReport rep = evaluate(model, manifest, max_sprites);
    std::cout << rep.serialize();
    if (!out.empty()) {
        std::ofstream f(out);
        f << rep.serialize();
    }
    return 0;
}

int cmd_translate(const std::string& checkpoint, const std::string& image, int from, int to_v,
                  const std::string& out, bool panels) {
    ModelT<float> model = load_model(checkpoint);
    require(from >= 0 && from < model.cfg.num_views && to_v >= 0 && to_v < model.cfg.num_views,
            "view labels must lie in [0, " + std::to_string(model.cfg.num_views) + ")");
    Tensor x = load_image_tensor(image);
    auto gen = translate_once(model, x, from, to_v);
    std::vector<ImageU8> grid = {tensor_panel(x), tensor_panel(gen.image_mixed)};
    if (panels) {
        grid.push_back(tensor_panel(gen.image_gen));
        grid.push_back(tensor_panel(gen.image_warp));
        grid.push_back(mask_panel(gen.mask));
    }
    write_png(out, hcat(grid));
    std::cout << "wrote " << out << "\n";
    return 0;
}

int cmd_interpolate(const std::string& checkpoint, const std::string& image, int from, int v1,
                    int v2, int steps, const std::string& out) {
    ModelT<float> model = load_model(checkpoint);
    const int K = model.cfg.num_views;
    require(steps >= 2, "interpolate: need at least 2 steps");
    if (std::abs(v1 - v2) != 1)
        std::cerr << "warning: views " << v1 << " and " << v2
                  << " are not adjacent; interpolating anyway\n";
    Tensor x = load_image_tensor(image);
    std::vector<ImageU8> frames;
    for (int i = 0; i < steps; i++) {
        const float lam = static_cast<float>(i) / static_cast<float>(steps - 1);
        std::vector<float> soft(K, 0.f);
        soft[v1] += 1.f - lam;
        soft[v2] += lam;
        Tensor target = Tensor::from_data({1, K, 1, 1}, soft);
        auto gen = translate_once(model, x, from, v1, &target);
        frames.push_back(tensor_panel(gen.image_mixed));
    }
    write_png(out, hcat(frames));
    std::cout << "wrote " << out << " (" << steps << " frames)\n";
    return 0;
}

int cmd_flowviz(const std::string& checkpoint, const std::string& image, int from, int to_v,
                const std::string& out) {
    ModelT<float> model = load_model(checkpoint);
    Tensor x = load_image_tensor(image);
    auto gen = translate_once(model, x, from, to_v);
    const auto& st = gen.state;

    auto panel = [](const FlowField& f, int upscale) {
        const Shape4 s = f.shape();
        ImageU8 img = flow_viz_encode(f.field.data().data(),
                                      f.field.data().data() + s.hw(), static_cast<int>(s.h),
                                      static_cast<int>(s.w));
        return upscale > 1 ? upscale_nearest_u8(img, upscale) : img;
    };
    // the attention matrix renders as its most-relevant-coordinate hard flow
    FlowField soft_hard = soft_flow_argmax(st.sf);
    std::vector<ImageU8> grid = {panel(st.kg_flow, 4), panel(soft_hard, 4),
                                 panel(*st.res_half, 2), panel(*st.res_full, 1)};
    write_png(out, hcat(grid));
    std::cout << "wrote " << out << " (kg | soft-argmax | residual half | residual full)\n";
    return 0;
}

int cmd_gradcheck(const std::string& scope, bool self_test) {
    if (self_test) {
        const bool detected = gradsuite_selftest();
        std::cout << "corrupted-backward self-test: " << (detected ? "detected" : "MISSED")
                  << "\n";
        return detected ? 0 : 2;
    }
    auto checks = run_gradsuite(scope);
    bool all_pass = true;
    for (const auto& c : checks) {
        std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name
                  << " max_rel_err=" << c.max_rel_err << " tol=" << c.tol << "\n";
        all_pass = all_pass && c.pass;
    }
    std::cout << (all_pass ? "gradcheck: all passed\n" : "gradcheck: FAILURES\n");
    return all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"iterative-deformation view synthesis"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic multi-view dataset");
    int sprites = 10, size = 64;
    std::string out_dir = "data";
    uint64_t seed = 0;
    bool save_flows = false;
    gen->add_option("--sprites", sprites, "number of sprites");
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--seed", seed, "dataset seed");
    gen->add_option("--size", size, "image size");
    gen->add_flag("--save-flows", save_flows, "also write the analytic flow archive");

    auto* train = app.add_subcommand("train", "train a model");
    std::string config_path;
    std::vector<std::string> overrides;
    bool resume = false;
    train->add_option("--config", config_path, "key=value config file");
    train->add_option("--set", overrides, "override config entries (key=value)");
    train->add_flag("--resume", resume, "resume from the run directory checkpoint");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    std::string checkpoint, dataset, eval_out;
    int max_sprites = -1, threads = 2;
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    eval_cmd->add_option("--dataset", dataset, "dataset directory")->required();
    eval_cmd->add_option("--out", eval_out, "also write the report to this file");
    eval_cmd->add_option("--max-sprites", max_sprites, "limit test sprites (debug)");
    eval_cmd->add_option("--threads", threads, "BLAS threads");

    auto* tr = app.add_subcommand("translate", "translate one image to a target view");
    std::string image, tr_out = "translated.png";
    int from = 4, to_v = 4;
    bool panels = false;
    tr->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    tr->add_option("--image", image, "64x64 input image")->required();
    tr->add_option("--from", from, "source view index")->required();
    tr->add_option("--to", to_v, "target view index")->required();
    tr->add_option("--out", tr_out, "output grid path");
    tr->add_flag("--panels", panels, "include synthesis, warped source, and mask panels");

    auto* interp = app.add_subcommand("interpolate", "continuous view interpolation strip");
    int v1 = 0, v2 = 1, steps = 5;
    std::string in_out = "interpolated.png";
    interp->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    interp->add_option("--image", image, "64x64 input image")->required();
    interp->add_option("--from", from, "source view index")->required();
    interp->add_option("--v1", v1, "first target view")->required();
    interp->add_option("--v2", v2, "second target view")->required();
    interp->add_option("--steps", steps, "number of frames");
    interp->add_option("--out", in_out, "output strip path");

    auto* fv = app.add_subcommand("flowviz", "render the per-stage flows of one translation");
    std::string fv_out = "flows.png";
    fv->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    fv->add_option("--image", image, "64x64 input image")->required();
    fv->add_option("--from", from, "source view index")->required();
    fv->add_option("--to", to_v, "target view index")->required();
    fv->add_option("--out", fv_out, "output grid path");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite (64-bit)");
    std::string scope = "all";
    bool self_test = false;
    gc->add_option("--scope", scope, "warp | deform | loss | net | all");
    gc->add_flag("--self-test", self_test, "verify a corrupted backward is detected");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(sprites, out_dir, seed, size, save_flows);
        if (train->parsed()) return cmd_train(build_config(config_path, overrides), resume);
        if (eval_cmd->parsed()) return cmd_eval(checkpoint, dataset, eval_out, max_sprites, threads);
        if (tr->parsed()) return cmd_translate(checkpoint, image, from, to_v, tr_out, panels);
        if (interp->parsed())
            return cmd_interpolate(checkpoint, image, from, v1, v2, steps, in_out);
        if (fv->parsed()) return cmd_flowviz(checkpoint, image, from, to_v, fv_out);
        if (gc->parsed()) return cmd_gradcheck(scope, self_test);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
