#pragma once

// Training objectives: hinge adversarial pair, auxiliary classification,
// pixel/content reconstruction, KL regularizer, latent disentangling pair,
// rough synthesis supervision, and the weighted total.

#include <map>
#include <string>

#include "vsyn/tensor.hpp"

namespace vsyn {

struct LossWeights {
    double content = 5.0;  // alpha1
    double pixel = 5.0;    // alpha2
    double kl = 0.1;       // alpha3
    double rough = 10.0;   // alpha4
};

// Hinge pair: the discriminator side receives detached fakes.
template <typename T>
TensorT<T> hinge_d_loss(const TensorT<T>& d_real, const TensorT<T>& d_fake_detached) {
    TensorT<T> real_term = mean_all(relu(add_scalar(neg(d_real), T(1))));
    TensorT<T> fake_term = mean_all(relu(add_scalar(d_fake_detached, T(1))));
    return add(real_term, fake_term);
}

// Generator-side hinge, max(0, 1 - D(fake)), as stated.
template <typename T>
TensorT<T> hinge_g_loss(const TensorT<T>& d_fake) {
    return mean_all(relu(add_scalar(neg(d_fake), T(1))));
}

// Cross entropy against a (possibly soft) target distribution, mean over batch.
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const TensorT<T>& target) {
    const Shape4 s = logits.shape();
    require(s == target.shape(), "cross_entropy: logits " + s.str() + " vs target " +
                                     target.shape().str());
    TensorT<T> logp = log_softmax_rows(logits, s.c);
    return scale(neg(sum_all(mul(target, logp))), T(1) / static_cast<T>(s.b));
}

// Uniform-target cross entropy (the adversarial push toward an uninformative
// latent classifier); minimum value is ln K.
template <typename T>
TensorT<T> uniform_cross_entropy(const TensorT<T>& logits) {
    const Shape4 s = logits.shape();
    TensorT<T> logp = log_softmax_rows(logits, s.c);
    return scale(neg(sum_all(logp)), T(1) / static_cast<T>(s.b * s.c));
}

// Mean absolute error over all elements.
template <typename T>
TensorT<T> pixel_loss(const TensorT<T>& predicted, const TensorT<T>& target) {
    require(predicted.shape() == target.shape(),
            "pixel_loss: shapes disagree, " + predicted.shape().str() + " vs " +
                target.shape().str());
    return mean_all(abs_op(sub(predicted, target)));
}

// Sum of per-level mean absolute errors over the frozen feature pyramid.
template <typename T>
TensorT<T> content_loss(const std::vector<TensorT<T>>& feat_pred,
                        const std::vector<TensorT<T>>& feat_target) {
    require(feat_pred.size() == feat_target.size() && !feat_pred.empty(),
            "content_loss: feature pyramids disagree");
    TensorT<T> total = pixel_loss(feat_pred[0], feat_target[0]);
    for (size_t i = 1; i < feat_pred.size(); i++)
        total = add(total, pixel_loss(feat_pred[i], feat_target[i]));
    return total;
}

// Mean over the batch of 1/2 sum_d (mu^2 + exp(lv) - 1 - lv).
template <typename T>
TensorT<T> kl_loss(const TensorT<T>& mu, const TensorT<T>& log_var) {
    require(mu.shape() == log_var.shape(), "kl_loss: shapes disagree");
    TensorT<T> lv = clamp(log_var, T(-10), T(10));
    TensorT<T> term = sub(sub(add(square(mu), exp_op(lv)), TensorT<T>::filled(mu.shape(), T(1))),
                          lv);
    return scale(sum_all(term), T(0.5) / static_cast<T>(mu.shape().b));
}

// Rough synthesis supervision: L1 to the target plus classification of the
// rough image under the shared classifier.
template <typename T>
TensorT<T> rough_loss(const TensorT<T>& rough, const TensorT<T>& target,
                      const TensorT<T>& rough_cls_logits, const TensorT<T>& onehot_target) {
    return add(pixel_loss(rough, target), cross_entropy(rough_cls_logits, onehot_target));
}

// ---------------------------------------------------------------------------
// ledger

// All named scalars of one step plus the grouped totals.
struct LossReport {
    std::map<std::string, double> values;

    double at(const std::string& name) const {
        auto it = values.find(name);
        require(it != values.end(), "loss report: missing component '" + name + "'");
        return it->second;
    }
};

// Assembles the grouped totals from named parts. Components must all be
// present; the E,G total is the stated weighted sum.
inline LossReport total_losses(const std::map<std::string, double>& parts,
                               const LossWeights& w) {
    LossReport rep;
    rep.values = parts;
    auto need = [&](const std::string& k) {
        auto it = parts.find(k);
        require(it != parts.end(), "total_losses: missing component '" + k + "'");
        return it->second;
    };
    const double total_eg = need("adv_g") + need("cls_eg") + w.content * need("content") +
                            w.pixel * need("pixel") + w.kl * need("kl") + need("cls_c_enc") +
                            need("cls_z_enc") + w.rough * need("rough");
    rep.values["total_eg"] = total_eg;
    rep.values["total_d"] = need("adv_d");
    return rep;
}

}  // namespace vsyn
