#pragma once

// Training loop: per step, sample (sprite, a, b) pairs, run the translation
// pass, update (D, C, DAC), then rebuild the remaining passes (self and
// cyclic) and update (E, G). All per-step randomness derives from
// (seed, step), so runs are resumable and bit-reproducible.

#include <filesystem>
#include <fstream>
#include <unordered_map>

#include "vsyn/checkpoint.hpp"
#include "vsyn/config.hpp"
#include "vsyn/losses.hpp"
#include "vsyn/networks.hpp"
#include "vsyn/png_io.hpp"
#include "vsyn/sprites.hpp"

namespace vsyn {

struct NonFiniteLossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void save_checkpoint(const std::string& path, ModelT<float>& model,
                            const TrainConfig& cfg, int64_t step) {
    CheckpointWriter w(path);
    auto params = model.all_params();
    for (auto* p : params) w.add(p->name, p->value.shape(), p->value.data().data());
    for (auto* p : params) {
        w.add_vector(p->name + "#m", p->m);
        w.add_vector(p->name + "#v", p->v);
        if (!p->sn_u.empty()) w.add_vector(p->name + "#snu", p->sn_u);
    }
    std::vector<float> step_v = {static_cast<float>(step)};
    w.add_vector("meta#step", step_v);
    w.add_text("meta#config", cfg.serialize());
}

inline int64_t load_checkpoint(const std::string& path, ModelT<float>& model) {
    CheckpointArchive ar(path);
    for (auto* p : model.all_params()) {
        const auto& rec = ar.at(p->name);
        require(rec.shape == p->value.shape(),
                "checkpoint shape mismatch for '" + p->name + "': file has " + rec.shape.str() +
                    ", model has " + p->value.shape().str());
        p->value.data() = rec.data;
        p->m = ar.at(p->name + "#m").data;
        p->v = ar.at(p->name + "#v").data;
        if (ar.has(p->name + "#snu")) p->sn_u = ar.at(p->name + "#snu").data;
    }
    return static_cast<int64_t>(ar.at("meta#step").data.at(0));
}

inline TrainConfig checkpoint_config(const std::string& path) {
    CheckpointArchive ar(path);
    return TrainConfig::deserialize(ar.text("meta#config"));
}

// Decoded-image cache so training never re-reads PNGs.
class ImageCache {
  public:
    explicit ImageCache(const DatasetManifest& m) : manifest_(m) {}

    const std::vector<float>& get(int sprite, int view) {
        const int64_t key = static_cast<int64_t>(sprite) * 64 + view;
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        auto img = from_u8(read_png(manifest_.image_path(sprite, view)));
        return cache_.emplace(key, std::move(img)).first->second;
    }

  private:
    const DatasetManifest& manifest_;
    std::unordered_map<int64_t, std::vector<float>> cache_;
};

struct StepSample {
    std::vector<int> sprite, view_a, view_b;
};

class Trainer {
  public:
    Trainer(const TrainConfig& cfg, const DatasetManifest& manifest)
        : cfg_(cfg), manifest_(manifest), model_(cfg.model), cache_(manifest_) {
        for (size_t i = 0; i < manifest_.is_train.size(); i++)
            if (manifest_.is_train[i]) train_sprites_.push_back(static_cast<int>(i));
        require(!train_sprites_.empty(), "dataset has no training sprites");
        std::filesystem::create_directories(cfg_.out_dir);
    }

    ModelT<float>& model() { return model_; }
    int64_t step() const { return step_; }

    void resume(const std::string& checkpoint_path) {
        step_ = load_checkpoint(checkpoint_path, model_);
    }

    StepSample sample_step(int64_t step_index) {
        auto rng = make_rng(cfg_.seed, 0xba7c4000ULL + static_cast<uint64_t>(step_index));
        StepSample s;
        std::uniform_int_distribution<size_t> pick_sprite(0, train_sprites_.size() - 1);
        std::uniform_int_distribution<int> pick_view(0, manifest_.num_views - 1);
        for (int i = 0; i < cfg_.batch_size; i++) {
            s.sprite.push_back(train_sprites_[pick_sprite(rng)]);
            s.view_a.push_back(pick_view(rng));
            s.view_b.push_back(pick_view(rng));
        }
        return s;
    }

    Tensor batch_images(const StepSample& s, bool target_side) {
        const int64_t S = manifest_.image_size;
        std::vector<float> data;
        data.reserve(static_cast<size_t>(cfg_.batch_size) * 3 * S * S);
        for (int i = 0; i < cfg_.batch_size; i++) {
            const auto& img =
                cache_.get(s.sprite[i], target_side ? s.view_b[i] : s.view_a[i]);
            data.insert(data.end(), img.begin(), img.end());
        }
        return Tensor::from_data({cfg_.batch_size, 3, S, S}, std::move(data));
    }

    // One full iteration: returns the loss ledger of this step.
    LossReport train_step() {
        const int64_t t = step_ + 1;
        auto rng = make_rng(cfg_.seed, 0x5a3b1000ULL + static_cast<uint64_t>(t));
        const StepSample s = sample_step(t);

        Tensor x_a = batch_images(s, false);
        Tensor x_b = batch_images(s, true);
        std::vector<ViewLabel> la, lb;
        for (int i = 0; i < cfg_.batch_size; i++) {
            la.push_back({s.view_a[i], manifest_.num_views});
            lb.push_back({s.view_b[i], manifest_.num_views});
        }
        Tensor oh_a = onehot_labels<float>(la);
        Tensor oh_b = onehot_labels<float>(lb);
        Tensor eps_b = randn<float>({cfg_.batch_size, cfg_.model.z_dim, 1, 1}, rng);
        Tensor eps_aa = randn<float>({cfg_.batch_size, cfg_.model.z_dim, 1, 1}, rng);

        // translation pass toward the target view (graph reused by both phases)
        auto enc = model_.encoder.forward(x_a);
        Tensor z = reparameterize(enc.mu, enc.log_var, eps_b);
        auto gen_b = model_.generator.forward(x_a, enc, z, oh_a, oh_b);

        std::map<std::string, double> parts;

        // ---- discriminator / classifier / latent-classifier phase
        model_.disc.power_iterate();
        Tensor fake_detached = detach(gen_b.image_mixed);
        auto d_real = model_.disc.forward(x_b, oh_b);
        auto d_fake = model_.disc.forward(fake_detached, oh_b);
        Tensor loss_d = hinge_d_loss(d_real.adv_score, d_fake.adv_score);
        Tensor loss_c = cross_entropy(d_real.cls_logits, oh_b);
        Tensor loss_dac = cross_entropy(model_.dac.forward(detach(z)), oh_a);
        // interior values are recycled by the backward sweep; read them first
        parts["adv_d"] = loss_d.item();
        parts["cls_c"] = loss_c.item();
        parts["dac"] = loss_dac.item();
        Tensor d_phase = add(add(loss_d, loss_c), loss_dac);
        d_phase.backward(true);
        adam_step(model_.dc_params(), cfg_.adam_d, t);
        adam_step(model_.dac_params(), cfg_.adam_dac, t);
        zero_all_grads();

        // ---- encoder / generator phase
        auto gen_a = model_.generator.forward(x_a, enc, z, oh_a, oh_a);
        auto enc_b = model_.encoder.forward(gen_b.image_mixed);
        Tensor z_aa = reparameterize(enc_b.mu, enc_b.log_var, eps_aa);
        auto gen_aa = model_.generator.forward(gen_b.image_mixed, enc_b, z_aa, oh_b, oh_a);

        auto d_fake2 = model_.disc.forward(gen_b.image_mixed, oh_b);
        Tensor adv_g = hinge_g_loss(d_fake2.adv_score);
        Tensor cls_eg = cross_entropy(d_fake2.cls_logits, oh_b);

        Tensor pixel = add(add(pixel_loss(gen_b.image_mixed, x_b),
                               pixel_loss(gen_a.image_mixed, x_a)),
                           pixel_loss(gen_aa.image_mixed, x_a));
        Tensor content = add(
            add(content_loss(model_.content.forward(gen_b.image_mixed),
                             model_.content.forward(x_b)),
                content_loss(model_.content.forward(gen_a.image_mixed),
                             model_.content.forward(x_a))),
            content_loss(model_.content.forward(gen_aa.image_mixed),
                         model_.content.forward(x_a)));
        Tensor kl = kl_loss(enc.mu, enc.log_var);
        Tensor cls_c_enc = cross_entropy(enc.view_logits, oh_a);
        Tensor cls_z_enc = uniform_cross_entropy(model_.dac.forward_frozen(z));
        auto rough_cls = model_.disc.forward(gen_b.image_rough, oh_b);
        Tensor rough = rough_loss(gen_b.image_rough, x_b, rough_cls.cls_logits, oh_b);

        parts["adv_g"] = adv_g.item();
        parts["cls_eg"] = cls_eg.item();
        parts["pixel"] = pixel.item();
        parts["content"] = content.item();
        parts["kl"] = kl.item();
        parts["cls_c_enc"] = cls_c_enc.item();
        parts["cls_z_enc"] = cls_z_enc.item();
        parts["rough"] = rough.item();

        const LossWeights& w = cfg_.weights;
        Tensor total_eg = add(adv_g, cls_eg);
        total_eg = add(total_eg, scale(content, static_cast<float>(w.content)));
        total_eg = add(total_eg, scale(pixel, static_cast<float>(w.pixel)));
        total_eg = add(total_eg, scale(kl, static_cast<float>(w.kl)));
        total_eg = add(total_eg, add(cls_c_enc, cls_z_enc));
        total_eg = add(total_eg, scale(rough, static_cast<float>(w.rough)));
        total_eg.backward(true);
        adam_step(model_.eg_params(), cfg_.adam_eg, t);
        zero_all_grads();

        LossReport rep = total_losses(parts, w);
        for (const auto& [name, value] : rep.values)
            if (!std::isfinite(value))
                throw NonFiniteLossError("non-finite loss '" + name + "' at step " +
                                         std::to_string(t));
        step_ = t;
        return rep;
    }

    // Runs to cfg.total_steps with periodic checkpoints and metric rows.
    void run(std::ostream* progress = nullptr) {
        std::ofstream metrics(cfg_.out_dir + "/metrics.csv", std::ios::app);
        require(static_cast<bool>(metrics), "cannot write metrics in " + cfg_.out_dir);
        const std::string ckpt = cfg_.out_dir + "/checkpoint.idu";
        while (step_ < cfg_.total_steps) {
            LossReport rep = train_step();
            if (step_ % cfg_.metrics_interval == 0) {
                for (const auto& [name, value] : rep.values)
                    metrics << step_ << "," << name << "," << value << "\n";
                metrics.flush();
            }
            if (progress && (step_ % 50 == 0 || step_ == cfg_.total_steps)) {
                (*progress) << "step " << step_ << "/" << cfg_.total_steps
                            << " total_eg=" << rep.at("total_eg")
                            << " pixel=" << rep.at("pixel") << " adv_d=" << rep.at("adv_d")
                            << std::endl;
            }
            if (step_ % cfg_.checkpoint_interval == 0 || step_ == cfg_.total_steps)
                save_checkpoint(ckpt, model_, cfg_, step_);
        }
        save_checkpoint(ckpt, model_, cfg_, step_);
    }

    void zero_all_grads() { zero_grads(model_.all_params()); }

  private:
    TrainConfig cfg_;
    DatasetManifest manifest_;
    ModelT<float> model_;
    ImageCache cache_;
    std::vector<int> train_sprites_;
    int64_t step_ = 0;
};

}  // namespace vsyn
