#include "retrolens/losses.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "retrolens/errors.hpp"

namespace retrolens {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes differ");
}

// Channel count used by the KL reduction: dim 1 for batched maps, dim 0 for
// plain code vectors.
int kl_channels(const Tensor& t) {
    if (t.ndim() == 0) throw ShapeError("kl_loss: need at least one dimension");
    return t.ndim() >= 2 ? t.dim(1) : t.dim(0);
}

Tensor mean_square(const Tensor& t) { return mean(square(t)); }

}  // namespace

void LossWeights::validate() const {
    if (alpha < 0.0 || lambda1 < 0.0 || lambda2 < 0.0)
        throw ValueError("LossWeights: weights must be >= 0");
}

Tensor kl_loss(const Tensor& mu, const Tensor& logvar) {
    check_same_shape(mu, logvar, "kl_loss");
    // 0.5 * (mu^2 + exp(logvar) - logvar - 1), summed over channels and
    // averaged over everything else.
    Tensor term = sub(add(square(mu), exp_t(logvar)), add_scalar(logvar, 1.0));
    const double norm =
        static_cast<double>(kl_channels(mu)) / static_cast<double>(mu.numel());
    return scale(sum(term), 0.5 * norm);
}

Tensor kl_loss(const LatentCode& code) { return kl_loss(code.mu, code.logvar); }

Tensor recon_l1(const Tensor& out, const Tensor& target) {
    return mean(abs_t(sub(out, target)));
}

Tensor lsgan_d(const Tensor& d_real, const Tensor& d_fake) {
    return add(mean_square(add_scalar(d_real, -1.0)), mean_square(d_fake));
}

Tensor lsgan_g(const Tensor& d_fake) { return mean_square(add_scalar(d_fake, -1.0)); }

std::pair<Tensor, Tensor> latent_adv_loss(const Tensor& d_on_zx, const Tensor& d_on_zr) {
    Tensor d_loss = add(mean_square(d_on_zx), mean_square(add_scalar(d_on_zr, -1.0)));
    Tensor e_loss = add(mean_square(add_scalar(d_on_zx, -1.0)), mean_square(d_on_zr));
    return {d_loss, e_loss};
}

Tensor feature_matching(const ActivationStack& fake, const ActivationStack& real) {
    if (fake.layers.size() != real.layers.size())
        throw ShapeError("feature_matching: stacks have " + std::to_string(fake.layers.size()) +
                         " vs " + std::to_string(real.layers.size()) + " layers");
    if (fake.layers.empty()) throw ValueError("feature_matching: empty stacks");
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < fake.layers.size(); ++i)
        total = add(total, recon_l1(fake.layers[i], real.layers[i]));
    return total;
}

Tensor focal_loss(const Tensor& logits, const Tensor& target, double gamma,
                  double alpha_pos) {
    check_same_shape(logits, target, "focal_loss");
    if (gamma < 0.0) throw ValueError("focal_loss: gamma must be >= 0");
    if (alpha_pos <= 0.0) throw ValueError("focal_loss: alpha_pos must be > 0");
    std::vector<double> alpha_t(target.numel());
    for (std::size_t i = 0; i < alpha_t.size(); ++i) {
        const double y = target.data()[i];
        if (y != 0.0 && y != 1.0)
            throw ValueError("focal_loss: target values must be 0 or 1");
        alpha_t[i] = y == 1.0 ? alpha_pos : 1.0;
    }
    // signed = logit for positives, -logit for negatives, so that
    // p_t = sigmoid(signed), 1 - p_t = sigmoid(-signed), and
    // -log p_t = softplus(-signed) -- all stable at large magnitudes.
    Tensor signed_logit = select_mask(target, logits, neg(logits));
    Tensor ce = softplus_t(neg(signed_logit));
    Tensor modulator = pow_scalar(sigmoid_t(neg(signed_logit)), gamma);
    Tensor weight = Tensor::from_data(target.shape(), std::move(alpha_t));
    return mean(mul(weight, mul(modulator, ce)));
}

// ------------------------------------------------------------------ stage 1

namespace {

// Per-domain stage-1 terms. Builds the reconstruction path once and derives
// every player's view from it: the discriminator sees a detached fake, the
// generator-side GAN term runs with the discriminator frozen.
struct DomainTerms {
    Tensor kl;      // zero scalar unless phase.eg
    Tensor rec;     //
    Tensor gan_g;   //
    Tensor gan_d;   // zero scalar unless phase.d_img
    Tensor mu;      // encoder mean map (live) for the latent adversary
};

DomainTerms domain_terms(const Tensor& batch, const Vae& vae, const PatchDisc& disc,
                         const VaeObjectiveWeights& w, Rng& rng, const VaePhase& phase) {
    DomainTerms t{Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0),
                  Tensor::scalar(0.0), Tensor()};
    LatentCode code = w.sample ? vae.encode(batch, rng) : vae.encode_det(batch);
    t.mu = code.mu;
    Tensor recon = vae.decode(code.z);
    if (phase.eg) {
        t.kl = kl_loss(code);
        t.rec = recon_l1(recon, batch);
        if (w.gan_weight != 0.0) {
            ParamList dp = disc.params("d");
            FreezeGuard freeze(dp);
            t.gan_g = lsgan_g(disc.forward(recon));
        }
    }
    if (phase.d_img) t.gan_d = lsgan_d(disc.forward(batch), disc.forward(recon.detach()));
    return t;
}

}  // namespace

VaePlayerLosses vae1_objective(const Tensor& r_batch, const Tensor& x_batch,
                               const Vae1Nets& nets, const VaeObjectiveWeights& weights,
                               Rng& rng, const VaePhase& phase) {
    if (nets.vae == nullptr || nets.d_img == nullptr || nets.d_latent == nullptr)
        throw ContractError("vae1_objective: all networks must be provided");
    if (r_batch.ndim() != 4 || x_batch.ndim() != 4 || r_batch.dim(0) < 1 ||
        x_batch.dim(0) < 1)
        throw ShapeError("vae1_objective: batches must be nonempty [N,C,H,W]");

    DomainTerms r = domain_terms(r_batch, *nets.vae, *nets.d_img, weights, rng, phase);
    DomainTerms x = domain_terms(x_batch, *nets.vae, *nets.d_img, weights, rng, phase);

    VaePlayerLosses out;
    out.eg = Tensor::scalar(0.0);
    out.d_img = Tensor::scalar(0.0);
    out.d_latent = Tensor::scalar(0.0);

    if (phase.eg) {
        Tensor kl = add(r.kl, x.kl);
        Tensor rec = add(r.rec, x.rec);
        Tensor gan = add(r.gan_g, x.gan_g);
        out.eg = add(add(scale(kl, weights.kl_weight), scale(rec, weights.alpha)),
                     scale(gan, weights.gan_weight));
        if (weights.latent_weight != 0.0) {
            ParamList dp = nets.d_latent->params("dz");
            FreezeGuard freeze(dp);
            Tensor e_loss =
                latent_adv_loss(nets.d_latent->forward(x.mu), nets.d_latent->forward(r.mu))
                    .second;
            out.eg = add(out.eg, scale(e_loss, weights.latent_weight));
            out.lat = e_loss.value();
        }
        out.kl = kl.value();
        out.rec = rec.value();
        out.gan = gan.value();
    }
    if (phase.d_img) out.d_img = add(r.gan_d, x.gan_d);
    if (phase.d_latent) {
        out.d_latent = latent_adv_loss(nets.d_latent->forward(x.mu.detach()),
                                       nets.d_latent->forward(r.mu.detach()))
                           .first;
    }
    return out;
}

VaePlayerLosses vae2_objective(const Tensor& y_batch, const Vae& vae,
                               const PatchDisc& d_img, const VaeObjectiveWeights& weights,
                               Rng& rng, const VaePhase& phase) {
    if (y_batch.ndim() != 4 || y_batch.dim(0) < 1)
        throw ShapeError("vae2_objective: batch must be nonempty [N,C,H,W]");
    DomainTerms y = domain_terms(y_batch, vae, d_img, weights, rng, phase);

    VaePlayerLosses out;
    out.eg = Tensor::scalar(0.0);
    out.d_img = Tensor::scalar(0.0);
    out.d_latent = Tensor::scalar(0.0);
    if (phase.eg) {
        out.eg = add(add(scale(y.kl, weights.kl_weight), scale(y.rec, weights.alpha)),
                     scale(y.gan_g, weights.gan_weight));
        out.kl = y.kl.value();
        out.rec = y.rec.value();
        out.gan = y.gan_g.value();
    }
    if (phase.d_img) out.d_img = y.gan_d;
    return out;
}

// ------------------------------------------------------------------ stage 2

MappingPlayerLosses mapping_loss(const Tensor& x_batch, const Tensor& y_batch,
                                 const Tensor& latent_mask01, const MappingNets& nets,
                                 const LossWeights& weights, const MappingPhase& phase,
                                 const FeatureHook& hook) {
    if (nets.vae1 == nullptr || nets.vae2 == nullptr || nets.mapper == nullptr ||
        nets.d_t == nullptr)
        throw ContractError("mapping_loss: all networks must be provided");
    weights.validate();
    if (x_batch.ndim() != 4 || y_batch.ndim() != 4 || x_batch.dim(0) < 1)
        throw ShapeError("mapping_loss: batches must be nonempty [N,C,H,W]");
    if (x_batch.dim(0) != y_batch.dim(0))
        throw ShapeError("mapping_loss: x and y batch sizes differ");

    // The VAEs stay fixed for the whole stage; with constant image batches
    // their encoders record nothing, so the latent codes below are constants.
    ParamList vae_params = nets.vae1->params("v1");
    {
        ParamList v2 = nets.vae2->params("v2");
        vae_params.insert(vae_params.end(), v2.begin(), v2.end());
    }
    FreezeGuard freeze_vaes(vae_params);

    Tensor z_x = nets.vae1->encode_det(x_batch).mu;
    Tensor z_y = nets.vae2->encode_det(y_batch).mu;

    MappingPlayerLosses out;
    out.t_side = Tensor::scalar(0.0);
    out.d_side = Tensor::scalar(0.0);

    Tensor mapped = nets.mapper->forward(z_x, latent_mask01);
    Tensor x_out = nets.vae2->decode(mapped);   // fake: x translated to Y
    Tensor y_out = nets.vae2->decode(z_y);      // real reference: y through its own VAE

    if (phase.t_side) {
        Tensor l1 = recon_l1(mapped, z_y);
        ActivationStack fake_acts, real_acts;
        Tensor d_on_fake;
        {
            ParamList dp = nets.d_t->params("dt");
            FreezeGuard freeze_d(dp);
            d_on_fake = nets.d_t->forward(x_out, &fake_acts);
            nets.d_t->forward(y_out, &real_acts);
        }
        Tensor gan = lsgan_g(d_on_fake);
        Tensor fm = hook ? feature_matching(hook(x_out), hook(y_out))
                         : feature_matching(fake_acts, real_acts);
        out.t_side =
            add(add(scale(l1, weights.lambda1), gan), scale(fm, weights.lambda2));
        out.l1 = l1.value();
        out.gan = gan.value();
        out.fm = fm.value();
    }
    if (phase.d_side) out.d_side = lsgan_d(nets.d_t->forward(y_out), nets.d_t->forward(x_out.detach()));
    return out;
}

}  // namespace retrolens
