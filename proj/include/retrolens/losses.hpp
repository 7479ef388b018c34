#pragma once

#include <functional>
#include <utility>

#include "retrolens/nets.hpp"
#include "retrolens/rng.hpp"
#include "retrolens/tensor.hpp"

namespace retrolens {

// Weights of the stage-2 mapping objective (and the shared reconstruction
// weight alpha used by the stage-1 VAE objective).
struct LossWeights {
    double alpha = 10.0;    // reconstruction weight in the VAE objective
    double lambda1 = 60.0;  // latent L1 weight in the mapping objective
    double lambda2 = 10.0;  // feature-matching weight in the mapping objective
    void validate() const;  // all weights must be >= 0
};

// KL(q(z|x) || N(0, I)) for a diagonal Gaussian: channels are summed, then
// the result is averaged over batch and spatial positions.
Tensor kl_loss(const Tensor& mu, const Tensor& logvar);
Tensor kl_loss(const LatentCode& code);

// Mean absolute difference. Throws ShapeError on mismatched shapes.
Tensor recon_l1(const Tensor& out, const Tensor& target);

// Least-squares GAN objectives. Inputs are discriminator outputs of any
// shape (patch maps or per-sample scalars); both reduce by mean.
//   lsgan_d = E[(D(real) - 1)^2] + E[D(fake)^2]
//   lsgan_g = E[(D(fake) - 1)^2]
Tensor lsgan_d(const Tensor& d_real, const Tensor& d_fake);
Tensor lsgan_g(const Tensor& d_fake);

// Latent adversarial pair. The discriminator drives D(z_x) -> 0 and
// D(z_r) -> 1; the encoder minimizes the swapped-target loss.
//   d_loss = E[D(z_x)^2] + E[(1 - D(z_r))^2]
//   e_loss = E[(1 - D(z_x))^2] + E[D(z_r)^2]
std::pair<Tensor, Tensor> latent_adv_loss(const Tensor& d_on_zx, const Tensor& d_on_zr);

// Sum over layers of the mean absolute activation difference, i.e. each
// layer's L1 gap normalized by its element count.
Tensor feature_matching(const ActivationStack& fake, const ActivationStack& real);

// Focal loss for binary per-pixel classification from raw logits.
// FL(p_t) = -alpha_t (1 - p_t)^gamma log p_t, mean over pixels, with
// alpha_t = alpha_pos on positives and 1 on negatives. Computed through
// softplus so confident predictions stay finite. Target must be 0/1.
Tensor focal_loss(const Tensor& logits, const Tensor& target, double gamma = 2.0,
                  double alpha_pos = 0.25);

// ------------------------------------------------------------------ stage 1

struct VaeObjectiveWeights {
    double alpha = 10.0;        // reconstruction weight
    double kl_weight = 1.0;     // KL regularizer (0 turns the VAE into an AE)
    double gan_weight = 1.0;    // image-realism GAN weight
    double latent_weight = 1.0; // latent adversarial weight (VAE1 only)
    bool sample = true;         // false: use z = mu (no stochastic sampling)
};

// Which player scalars a call should assemble. Phases that are skipped come
// back as zero scalars and record nothing for the skipped discriminators.
struct VaePhase {
    bool eg = true;        // encoder/generator objective
    bool d_img = true;     // image discriminator objective
    bool d_latent = true;  // latent discriminator objective (VAE1 only)
};

// One scalar per player plus detached term values for logging.
struct VaePlayerLosses {
    Tensor eg;        // minimized by the encoder + generator
    Tensor d_img;     // minimized by the image discriminator
    Tensor d_latent;  // minimized by the latent discriminator
    double kl = 0.0, rec = 0.0, gan = 0.0, lat = 0.0;
};

struct Vae1Nets {
    const Vae* vae = nullptr;
    const PatchDisc* d_img = nullptr;     // shared across both corrupted domains
    const LatentDisc* d_latent = nullptr;
};

// Total first-VAE objective over one batch from each corrupted domain:
// KL + alpha * L1 + image GAN per domain, plus the latent adversarial term.
// Fakes are detached for the discriminator scalar; discriminators are frozen
// while assembling the encoder/generator scalar, so each player's scalar
// reaches only its own parameters.
VaePlayerLosses vae1_objective(const Tensor& r_batch, const Tensor& x_batch,
                               const Vae1Nets& nets, const VaeObjectiveWeights& weights,
                               Rng& rng, const VaePhase& phase = {});

// The single-domain second-VAE objective: same construction without the
// latent adversarial term.
VaePlayerLosses vae2_objective(const Tensor& y_batch, const Vae& vae,
                               const PatchDisc& d_img, const VaeObjectiveWeights& weights,
                               Rng& rng, const VaePhase& phase = {});

// ------------------------------------------------------------------ stage 2

// Optional external multi-level feature extractor for the matching term;
// when absent, the discriminator's own activations are matched.
using FeatureHook = std::function<ActivationStack(const Tensor&)>;

struct MappingNets {
    const Vae* vae1 = nullptr;
    const Vae* vae2 = nullptr;
    const MappingNet* mapper = nullptr;
    const PatchDisc* d_t = nullptr;
};

struct MappingPhase {
    bool t_side = true;  // mapping-network objective
    bool d_side = true;  // discriminator objective
};

struct MappingPlayerLosses {
    Tensor t_side;  // minimized by the mapping network
    Tensor d_side;  // minimized by the image discriminator
    double l1 = 0.0, gan = 0.0, fm = 0.0;
};

// Stage-2 mapping objective on paired batches: lambda1 * L1 between mapped
// and target latent codes, plus an image-space LSGAN and feature-matching
// term at the generator output. Both VAEs are frozen for the whole call;
// the fake is the decoded mapping of x and the real reference is the second
// VAE's own reconstruction of y, so both sides share one decoding pipeline.
// latent_mask01 is the 0/1 defect mask at latent resolution [N,1,h,w].
// Latent codes on both sides are the distribution means, so the stage is
// fully deterministic.
MappingPlayerLosses mapping_loss(const Tensor& x_batch, const Tensor& y_batch,
                                 const Tensor& latent_mask01, const MappingNets& nets,
                                 const LossWeights& weights,
                                 const MappingPhase& phase = {},
                                 const FeatureHook& hook = {});

}  // namespace retrolens
