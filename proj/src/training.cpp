#include "retrolens/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "retrolens/errors.hpp"
#include "retrolens/metrics.hpp"
#include "retrolens/rng.hpp"

namespace retrolens {

// ------------------------------------------------------------------ optimizer

AdamState AdamState::make(const ParamList& params) {
    AdamState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& [name, t] : params) {
        st.m.emplace_back(t.numel(), 0.0);
        st.v.emplace_back(t.numel(), 0.0);
    }
    return st;
}

void adam_step(AdamState& state, const ParamList& params, double lr) {
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw ContractError("adam_step: state not aligned to parameter list");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t p = 0; p < params.size(); ++p) {
        const auto& [name, tensor] = params[p];
        auto& m = state.m[p];
        auto& v = state.v[p];
        if (m.size() != tensor.numel())
            throw ContractError("adam_step: moment size mismatch for " + name);
        const std::vector<double>* grad = tensor.has_grad() ? &tensor.grad() : nullptr;
        auto& data = tensor.mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad != nullptr ? (*grad)[i] : 0.0;
            if (!std::isfinite(g))
                throw TrainingDivergedError("adam_step: non-finite gradient in " + name);
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            data[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + state.eps);
        }
    }
}

double clip_grad_norm(const ParamList& params, double max_norm) {
    if (max_norm <= 0.0) throw ValueError("clip_grad_norm: max_norm must be > 0");
    double sq = 0.0;
    for (const auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) {
            if (!std::isfinite(g))
                throw TrainingDivergedError("clip_grad_norm: non-finite gradient in " + name);
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& [name, t] : params) {
            if (!t.has_grad()) continue;
            Tensor handle = t;
            for (double& g : handle.mutable_grad()) g *= s;
        }
    }
    return norm;
}

// ------------------------------------------------------------------ schedule

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ValueError("TrainConfig: lr must be > 0");
    if (epochs < 1) throw ValueError("TrainConfig: epochs must be >= 1");
    if (decay_start < 0 || decay_start >= epochs)
        throw ValueError("TrainConfig: decay_start must lie in [0, epochs)");
    if (batch < 1) throw ValueError("TrainConfig: batch must be >= 1");
    if (crop < 4 || crop % 4 != 0)
        throw ValueError("TrainConfig: crop must be a positive multiple of 4");
    if (stage1_iters < 0 || stage2_iters < 0 || detector_iters < 0 ||
        detector_finetune_iters < 0)
        throw ValueError("TrainConfig: iteration counts must be >= 0");
    if (grad_clip <= 0.0) throw ValueError("TrainConfig: grad_clip must be > 0");
    if (divergence_threshold <= 0.0)
        throw ValueError("TrainConfig: divergence_threshold must be > 0");
    if (log_every < 1) throw ValueError("TrainConfig: log_every must be >= 1");
    weights.validate();
    net.validate();
}

double lr_at(const TrainConfig& config, int epoch) {
    if (epoch < 0 || epoch >= config.epochs)
        throw ValueError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                         std::to_string(config.epochs) + ")");
    if (epoch <= config.decay_start) return config.lr;
    // Linear from full lr at decay_start down to exactly 0 at epochs-1.
    const double denom = static_cast<double>(config.epochs - 1 - config.decay_start);
    return config.lr * static_cast<double>(config.epochs - 1 - epoch) / denom;
}

// ------------------------------------------------------------------ helpers

namespace {

int epoch_of(const TrainConfig& c, std::uint64_t iter, std::uint64_t total) {
    if (total == 0) return 0;
    auto e = static_cast<std::int64_t>(iter * static_cast<std::uint64_t>(c.epochs) / total);
    if (e >= c.epochs) e = c.epochs - 1;
    return static_cast<int>(e);
}

void zero_grads(const ParamList& params) {
    for (const auto& [name, t] : params) {
        Tensor handle = t;
        handle.zero_grad();
    }
}

Image crop_image(const Image& src, int y0, int x0, int size) {
    if (y0 < 0 || x0 < 0 || y0 + size > src.h || x0 + size > src.w)
        throw ValueError("crop_image: window outside image");
    Image out = Image::zeros(src.c, size, size);
    for (int c = 0; c < src.c; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) out.at(c, y, x) = src.at(c, y0 + y, x0 + x);
    return out;
}

DefectMask crop_mask(const DefectMask& src, int y0, int x0, int size) {
    DefectMask out = DefectMask::empty(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            out.alpha[static_cast<std::size_t>(y) * size + x] =
                src.alpha[static_cast<std::size_t>(y0 + y) * src.w + (x0 + x)];
    return out;
}

void check_croppable(const Image& im, int crop, const char* who) {
    if (im.h < crop || im.w < crop)
        throw ValueError(std::string(who) + ": image " + std::to_string(im.h) + "x" +
                         std::to_string(im.w) + " smaller than crop " + std::to_string(crop));
}

Tensor sample_image_batch(const std::vector<Image>& data, int batch, int crop, Rng& rng) {
    std::vector<Image> picks;
    picks.reserve(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        const Image& src = data[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<int>(data.size()) - 1))];
        check_croppable(src, crop, "sample_image_batch");
        const int y0 = rng.uniform_int(0, src.h - crop);
        const int x0 = rng.uniform_int(0, src.w - crop);
        picks.push_back(crop_image(src, y0, x0, crop));
    }
    return image_batch(picks);
}

// Deterministic evaluation batch: center crops of the first `count` images.
Tensor fixed_probe(const std::vector<Image>& data, int count, int crop) {
    std::vector<Image> picks;
    picks.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const Image& src = data[static_cast<std::size_t>(i)];
        check_croppable(src, crop, "fixed_probe");
        picks.push_back(crop_image(src, (src.h - crop) / 2, (src.w - crop) / 2, crop));
    }
    return image_batch(picks);
}

struct PairBatch {
    Tensor x, y, mask;  // degraded, clean, 0/1 mask at latent resolution
};

PairBatch assemble_pairs(const std::vector<const DegradedPair*>& picks,
                         const std::vector<std::pair<int, int>>& offsets, int crop) {
    std::vector<Image> xs, ys;
    std::vector<Tensor> masks;
    xs.reserve(picks.size());
    ys.reserve(picks.size());
    masks.reserve(picks.size());
    for (std::size_t i = 0; i < picks.size(); ++i) {
        const DegradedPair& p = *picks[i];
        const auto [y0, x0] = offsets[i];
        xs.push_back(crop_image(p.degraded, y0, x0, crop));
        ys.push_back(crop_image(p.clean, y0, x0, crop));
        masks.push_back(latent_mask(crop_mask(p.mask, y0, x0, crop)));
    }
    return PairBatch{image_batch(xs), image_batch(ys), concat_batch(masks)};
}

PairBatch sample_pair_batch(const std::vector<DegradedPair>& pairs, int batch, int crop,
                            Rng& rng) {
    std::vector<const DegradedPair*> picks;
    std::vector<std::pair<int, int>> offsets;
    picks.reserve(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        const DegradedPair& p = pairs[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<int>(pairs.size()) - 1))];
        check_croppable(p.degraded, crop, "sample_pair_batch");
        offsets.emplace_back(rng.uniform_int(0, p.degraded.h - crop),
                             rng.uniform_int(0, p.degraded.w - crop));
        picks.push_back(&p);
    }
    return assemble_pairs(picks, offsets, crop);
}

PairBatch fixed_pair_probe(const std::vector<DegradedPair>& pairs, int count, int crop) {
    std::vector<const DegradedPair*> picks;
    std::vector<std::pair<int, int>> offsets;
    for (int i = 0; i < count; ++i) {
        const DegradedPair& p = pairs[static_cast<std::size_t>(i)];
        check_croppable(p.degraded, crop, "fixed_pair_probe");
        picks.push_back(&p);
        offsets.emplace_back((p.degraded.h - crop) / 2, (p.degraded.w - crop) / 2);
    }
    return assemble_pairs(picks, offsets, crop);
}

void guard_divergence(const TrainConfig& config, const char* stage, std::uint64_t iter,
                      std::initializer_list<std::pair<const char*, double>> losses) {
    for (const auto& [name, v] : losses) {
        if (!std::isfinite(v) || std::fabs(v) > config.divergence_threshold)
            throw TrainingDivergedError(std::string(stage) + " iter " + std::to_string(iter) +
                                        ": loss." + name + "=" + std::to_string(v) +
                                        " breaches the divergence guard");
    }
}

double probe_recon_l1(const Vae& vae, const Tensor& batch) {
    LatentCode code = vae.encode_det(batch);
    return recon_l1(vae.decode(code.z), batch).value();
}

// Each spatial position of a mu map is one latent vector; pool them across
// the batch for distribution comparisons.
std::vector<std::vector<double>> mu_vectors(const Tensor& mu) {
    const int n = mu.dim(0), c = mu.dim(1), h = mu.dim(2), w = mu.dim(3);
    std::vector<std::vector<double>> out;
    out.reserve(static_cast<std::size_t>(n) * h * w);
    for (int s = 0; s < n; ++s)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                std::vector<double> v(static_cast<std::size_t>(c));
                for (int ch = 0; ch < c; ++ch)
                    v[static_cast<std::size_t>(ch)] =
                        mu.data()[((static_cast<std::size_t>(s) * c + ch) * h + y) * w + x];
                out.push_back(std::move(v));
            }
    return out;
}

}  // namespace

// ------------------------------------------------------------------ stage 1

Stage1Result train_stage1(const std::vector<Image>& data_x, const std::vector<Image>& data_r,
                          const std::vector<Image>& data_y, const TrainConfig& config,
                          std::ostream* log) {
    config.validate();
    if (data_x.empty() || data_r.empty() || data_y.empty())
        throw ValueError("train_stage1: all three datasets must be nonempty");

    const NetConfig& nc = config.net;
    Stage1Result res;
    res.vae1 = Vae::make(nc, seed_for(config.seed, "stage1/vae1"));
    res.vae2 = Vae::make(nc, seed_for(config.seed, "stage1/vae2"));
    res.d_img1 = PatchDisc::make(nc.image_channels, nc.disc_base, seed_for(config.seed, "stage1/d_img1"));
    res.d_img2 = PatchDisc::make(nc.image_channels, nc.disc_base, seed_for(config.seed, "stage1/d_img2"));
    res.d_latent = LatentDisc::make(nc.latent, nc.disc_base, seed_for(config.seed, "stage1/d_latent"));

    const ParamList p_v1 = res.vae1.params("vae1");
    const ParamList p_v2 = res.vae2.params("vae2");
    const ParamList p_d1 = res.d_img1.params("d_img1");
    const ParamList p_d2 = res.d_img2.params("d_img2");
    const ParamList p_dz = res.d_latent.params("d_latent");
    res.opt_vae1 = AdamState::make(p_v1);
    res.opt_vae2 = AdamState::make(p_v2);
    res.opt_d1 = AdamState::make(p_d1);
    res.opt_d2 = AdamState::make(p_d2);
    res.opt_dz = AdamState::make(p_dz);

    const int probe_n = std::min<int>(8, static_cast<int>(data_y.size()));
    const Tensor probe_y = fixed_probe(data_y, probe_n, config.crop);
    const Tensor probe_r = fixed_probe(data_r, std::min<int>(8, static_cast<int>(data_r.size())),
                                       config.crop);
    const Tensor probe_x = fixed_probe(data_x, std::min<int>(8, static_cast<int>(data_x.size())),
                                       config.crop);
    res.init_recon_y = probe_recon_l1(res.vae2, probe_y);

    const Vae1Nets v1nets{&res.vae1, &res.d_img1, &res.d_latent};
    const bool latent_adv = config.vae_weights.latent_weight != 0.0;
    Rng data_rng(seed_for(config.seed, "stage1/data"));
    const auto total = static_cast<std::uint64_t>(config.stage1_iters);

    for (std::uint64_t it = 0; it < total; ++it) {
        const double lr = lr_at(config, epoch_of(config, it, total));
        const Tensor rb = sample_image_batch(data_r, config.batch, config.crop, data_rng);
        const Tensor xb = sample_image_batch(data_x, config.batch, config.crop, data_rng);
        const Tensor yb = sample_image_batch(data_y, config.batch, config.crop, data_rng);
        const std::uint64_t iter_seed = mix_seed(seed_for(config.seed, "stage1/eps"), it);

        double l_d1 = 0.0, l_d2 = 0.0, l_dz = 0.0, l_eg1 = 0.0, l_eg2 = 0.0;

        {  // image discriminators (VAEs frozen: their ops stay off the tape)
            zero_grads(p_d1);
            zero_grads(p_d2);
            FreezeGuard fz1(p_v1), fz2(p_v2);
            Tape tape;
            TapeScope scope(tape);
            Rng eps(mix_seed(iter_seed, 1));
            const VaePhase ph{false, true, false};
            VaePlayerLosses o1 = vae1_objective(rb, xb, v1nets, config.vae_weights, eps, ph);
            VaePlayerLosses o2 =
                vae2_objective(yb, res.vae2, res.d_img2, config.vae_weights, eps, ph);
            l_d1 = o1.d_img.value();
            l_d2 = o2.d_img.value();
            guard_divergence(config, "stage1", it, {{"d_img1", l_d1}, {"d_img2", l_d2}});
            backward(tape, add(o1.d_img, o2.d_img));
            clip_grad_norm(p_d1, config.grad_clip);
            clip_grad_norm(p_d2, config.grad_clip);
            adam_step(res.opt_d1, p_d1, lr);
            adam_step(res.opt_d2, p_d2, lr);
        }

        if (latent_adv) {  // latent discriminator
            zero_grads(p_dz);
            FreezeGuard fz1(p_v1);
            Tape tape;
            TapeScope scope(tape);
            Rng eps(mix_seed(iter_seed, 2));
            const VaePhase ph{false, false, true};
            VaePlayerLosses o1 = vae1_objective(rb, xb, v1nets, config.vae_weights, eps, ph);
            l_dz = o1.d_latent.value();
            guard_divergence(config, "stage1", it, {{"d_latent", l_dz}});
            backward(tape, o1.d_latent);
            clip_grad_norm(p_dz, config.grad_clip);
            adam_step(res.opt_dz, p_dz, lr);
        }

        {  // encoders + generators (discriminators frozen inside the objective)
            zero_grads(p_v1);
            zero_grads(p_v2);
            Tape tape;
            TapeScope scope(tape);
            Rng eps(mix_seed(iter_seed, 3));
            const VaePhase ph{true, false, false};
            VaePlayerLosses o1 = vae1_objective(rb, xb, v1nets, config.vae_weights, eps, ph);
            VaePlayerLosses o2 =
                vae2_objective(yb, res.vae2, res.d_img2, config.vae_weights, eps, ph);
            l_eg1 = o1.eg.value();
            l_eg2 = o2.eg.value();
            guard_divergence(config, "stage1", it, {{"vae1_eg", l_eg1}, {"vae2_eg", l_eg2}});
            backward(tape, add(o1.eg, o2.eg));
            clip_grad_norm(p_v1, config.grad_clip);
            clip_grad_norm(p_v2, config.grad_clip);
            adam_step(res.opt_vae1, p_v1, lr);
            adam_step(res.opt_vae2, p_v2, lr);
        }

        if (log != nullptr &&
            (it % static_cast<std::uint64_t>(config.log_every) == 0 || it + 1 == total)) {
            (*log) << "iter=" << it << " loss.vae1_eg=" << l_eg1 << " loss.vae2_eg=" << l_eg2
                   << " loss.d_img1=" << l_d1 << " loss.d_img2=" << l_d2
                   << " loss.d_latent=" << l_dz << " lr=" << lr << "\n";
        }
    }

    res.iters = total;
    res.final_recon_y = probe_recon_l1(res.vae2, probe_y);
    res.latent_swd = sliced_wasserstein(mu_vectors(res.vae1.encode_det(probe_r).mu),
                                        mu_vectors(res.vae1.encode_det(probe_x).mu), 32,
                                        seed_for(config.seed, "stage1/swd"));
    return res;
}

// ------------------------------------------------------------------ stage 2

namespace {

double eval_latent_l1(const std::vector<DegradedPair>& pairs, const Vae& vae1,
                      const Vae& vae2, const MappingNet& mapper, int crop) {
    const PairBatch probe = fixed_pair_probe(pairs, static_cast<int>(pairs.size()), crop);
    const Tensor z_x = vae1.encode_det(probe.x).mu;
    const Tensor z_y = vae2.encode_det(probe.y).mu;
    return recon_l1(mapper.forward(z_x, probe.mask), z_y).value();
}

}  // namespace

Stage2Result train_stage2(const std::vector<DegradedPair>& pairs, const Vae& vae1,
                          const Vae& vae2, const TrainConfig& config, std::ostream* log) {
    config.validate();
    if (pairs.empty()) throw ValueError("train_stage2: need at least one pair");

    const ParamList frozen = [&] {
        ParamList all = vae1.params("vae1");
        ParamList v2 = vae2.params("vae2");
        all.insert(all.end(), v2.begin(), v2.end());
        return all;
    }();
    const std::uint64_t checksum_before = param_checksum(frozen);

    Stage2Result res;
    res.mapper = MappingNet::make(config.net, seed_for(config.seed, "stage2/mapper"));
    res.d_t = PatchDisc::make(config.net.image_channels, config.net.disc_base,
                              seed_for(config.seed, "stage2/d_t"));
    const ParamList p_m = res.mapper.params("mapper");
    const ParamList p_dt = res.d_t.params("d_t");
    res.opt_mapper = AdamState::make(p_m);
    res.opt_dt = AdamState::make(p_dt);

    // Held-out split: the trailing eighth (at least one pair) measures the
    // latent L1; training uses the rest, or everything when the set is too
    // small to split.
    const auto n = static_cast<int>(pairs.size());
    const int eval_n = std::max(1, n / 8);
    const bool split = n - eval_n >= 1;
    const std::vector<DegradedPair> train_pairs(pairs.begin(),
                                                split ? pairs.end() - eval_n : pairs.end());
    const std::vector<DegradedPair> eval_pairs(split ? pairs.end() - eval_n : pairs.begin(),
                                               pairs.end());

    const MappingNets mnets{&vae1, &vae2, &res.mapper, &res.d_t};
    res.init_l1 = eval_latent_l1(eval_pairs, vae1, vae2, res.mapper, config.crop);

    Rng data_rng(seed_for(config.seed, "stage2/data"));
    const auto total = static_cast<std::uint64_t>(config.stage2_iters);

    for (std::uint64_t it = 0; it < total; ++it) {
        const double lr = lr_at(config, epoch_of(config, it, total));
        const PairBatch pb = sample_pair_batch(train_pairs, config.batch, config.crop, data_rng);

        double l_d = 0.0, l_t = 0.0, l_l1 = 0.0, l_fm = 0.0;

        {  // discriminator (mapper frozen: its ops stay off the tape)
            zero_grads(p_dt);
            FreezeGuard fz(p_m);
            Tape tape;
            TapeScope scope(tape);
            MappingPlayerLosses o =
                mapping_loss(pb.x, pb.y, pb.mask, mnets, config.weights, {false, true});
            l_d = o.d_side.value();
            guard_divergence(config, "stage2", it, {{"d_t", l_d}});
            backward(tape, o.d_side);
            clip_grad_norm(p_dt, config.grad_clip);
            adam_step(res.opt_dt, p_dt, lr);
        }

        {  // mapping network (discriminator frozen inside the objective)
            zero_grads(p_m);
            Tape tape;
            TapeScope scope(tape);
            MappingPlayerLosses o =
                mapping_loss(pb.x, pb.y, pb.mask, mnets, config.weights, {true, false});
            l_t = o.t_side.value();
            l_l1 = o.l1;
            l_fm = o.fm;
            guard_divergence(config, "stage2", it, {{"t", l_t}});
            backward(tape, o.t_side);
            clip_grad_norm(p_m, config.grad_clip);
            adam_step(res.opt_mapper, p_m, lr);
        }

        if (log != nullptr &&
            (it % static_cast<std::uint64_t>(config.log_every) == 0 || it + 1 == total)) {
            (*log) << "iter=" << it << " loss.t=" << l_t << " loss.t_l1=" << l_l1
                   << " loss.t_fm=" << l_fm << " loss.d_t=" << l_d << " lr=" << lr << "\n";
        }
    }

    res.iters = total;
    res.final_l1 = eval_latent_l1(eval_pairs, vae1, vae2, res.mapper, config.crop);

    if (param_checksum(frozen) != checksum_before)
        throw ContractError("train_stage2: frozen VAE parameters changed during the stage");
    return res;
}

// ------------------------------------------------------------------ detector

namespace {

struct DetectorBatch {
    Tensor x;       // degraded images
    Tensor target;  // 0/1 mask at full resolution
};

DetectorBatch sample_detector_batch(const std::vector<DegradedPair>& pairs, int batch,
                                    int crop, Rng& rng) {
    std::vector<Image> xs;
    std::vector<double> target;
    xs.reserve(static_cast<std::size_t>(batch));
    target.reserve(static_cast<std::size_t>(batch) * crop * crop);
    for (int i = 0; i < batch; ++i) {
        const DegradedPair& p = pairs[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<int>(pairs.size()) - 1))];
        check_croppable(p.degraded, crop, "sample_detector_batch");
        const int y0 = rng.uniform_int(0, p.degraded.h - crop);
        const int x0 = rng.uniform_int(0, p.degraded.w - crop);
        xs.push_back(crop_image(p.degraded, y0, x0, crop));
        const std::vector<double> full = p.mask.binary();
        for (int y = 0; y < crop; ++y)
            for (int x = 0; x < crop; ++x)
                target.push_back(full[static_cast<std::size_t>(y0 + y) * p.mask.w + (x0 + x)]);
    }
    return DetectorBatch{image_batch(xs),
                         Tensor::from_data({batch, 1, crop, crop}, std::move(target))};
}

// Pools every pixel of every held-out pair (center crop) into one ROC sweep.
double eval_detector_auc(const Unet& net, const std::vector<DegradedPair>& pairs, int crop) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& p : pairs) {
        check_croppable(p.degraded, crop, "eval_detector_auc");
        const int y0 = (p.degraded.h - crop) / 2;
        const int x0 = (p.degraded.w - crop) / 2;
        const Tensor logits = net.forward(image_batch({crop_image(p.degraded, y0, x0, crop)}));
        const std::vector<double> full = p.mask.binary();
        for (int y = 0; y < crop; ++y)
            for (int x = 0; x < crop; ++x) {
                scores.push_back(logits.data()[static_cast<std::size_t>(y) * crop + x]);
                labels.push_back(
                    full[static_cast<std::size_t>(y0 + y) * p.mask.w + (x0 + x)] > 0.5 ? 1 : 0);
            }
    }
    return roc_auc(scores, labels).auc;
}

void run_detector_phase(Unet& net, AdamState& opt, const ParamList& params,
                        const std::vector<DegradedPair>& pairs, const TrainConfig& config,
                        std::uint64_t iters, const char* phase, Rng& data_rng,
                        std::ostream* log) {
    for (std::uint64_t it = 0; it < iters; ++it) {
        const double lr = lr_at(config, epoch_of(config, it, iters));
        const DetectorBatch b = sample_detector_batch(pairs, config.batch, config.crop, data_rng);
        zero_grads(params);
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = focal_loss(net.forward(b.x), b.target);
        const double lv = loss.value();
        guard_divergence(config, phase, it, {{"focal", lv}});
        backward(tape, loss);
        clip_grad_norm(params, config.grad_clip);
        adam_step(opt, params, lr);
        if (log != nullptr &&
            (it % static_cast<std::uint64_t>(config.log_every) == 0 || it + 1 == iters)) {
            (*log) << "iter=" << it << " phase=" << phase << " loss.focal=" << lv << " lr=" << lr
                   << "\n";
        }
    }
}

// Trailing-eighth held-out split, shared convention with stage 2.
std::pair<std::vector<DegradedPair>, std::vector<DegradedPair>> split_pairs(
    const std::vector<DegradedPair>& pairs) {
    const auto n = static_cast<int>(pairs.size());
    const int eval_n = std::max(1, n / 8);
    if (n - eval_n < 1) return {pairs, pairs};
    return {{pairs.begin(), pairs.end() - eval_n}, {pairs.end() - eval_n, pairs.end()}};
}

}  // namespace

DetectorResult train_detector(const std::vector<DegradedPair>& synth,
                              const std::vector<DegradedPair>& pseudo_real,
                              const TrainConfig& config, std::ostream* log) {
    config.validate();
    if (synth.empty() || pseudo_real.empty())
        throw ValueError("train_detector: both pair sets must be nonempty");
    bool any_positive = false;
    for (const auto& p : synth)
        for (double a : p.mask.alpha)
            if (a > 0.5) {
                any_positive = true;
                break;
            }
    if (!any_positive)
        throw ValueError("train_detector: degenerate data, the positive class is empty");

    DetectorResult res;
    res.net = Unet::make(config.net, seed_for(config.seed, "detector"));
    const ParamList params = res.net.params("detector");
    res.opt = AdamState::make(params);

    const auto [synth_train, synth_eval] = split_pairs(synth);
    const auto [pseudo_train, pseudo_eval] = split_pairs(pseudo_real);

    Rng data_rng(seed_for(config.seed, "detector/data"));
    run_detector_phase(res.net, res.opt, params, synth_train, config,
                       static_cast<std::uint64_t>(config.detector_iters), "detector_synth",
                       data_rng, log);
    res.auc_synthetic = eval_detector_auc(res.net, synth_eval, config.crop);
    res.auc_pseudo_before = eval_detector_auc(res.net, pseudo_eval, config.crop);

    run_detector_phase(res.net, res.opt, params, pseudo_train, config,
                       static_cast<std::uint64_t>(config.detector_finetune_iters),
                       "detector_finetune", data_rng, log);
    res.auc_pseudo_after = eval_detector_auc(res.net, pseudo_eval, config.crop);
    res.iters = static_cast<std::uint64_t>(config.detector_iters) +
                static_cast<std::uint64_t>(config.detector_finetune_iters);
    return res;
}

// --------------------------------------------------------------- checkpoints

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    put_u64(out, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t at = 0;

    void need(std::size_t n, const char* field) const {
        if (at + n > buf.size())
            throw IoError(std::string("checkpoint: truncated while reading ") + field);
    }
    std::uint32_t u32(const char* field) {
        need(4, field);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        at += 4;
        return v;
    }
    std::uint64_t u64(const char* field) {
        need(8, field);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        at += 8;
        return v;
    }
    double f64(const char* field) {
        const std::uint64_t bits = u64(field);
        double d;
        std::memcpy(&d, &bits, sizeof d);
        return d;
    }
    std::string str(std::size_t n, const char* field) {
        need(n, field);
        std::string s = buf.substr(at, n);
        at += n;
        return s;
    }
};

constexpr char kMagic[4] = {'R', 'L', 'N', 'S'};
constexpr std::uint32_t kMaxName = 4096;
constexpr std::uint32_t kMaxDims = 8;

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, ck.version);
    put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        put_u32(out, static_cast<std::uint32_t>(t.ndim()));
        for (int d = 0; d < t.ndim(); ++d)
            put_u64(out, static_cast<std::uint64_t>(t.dim(d)));
        for (double v : t.data()) put_f64(out, v);
    }
    put_u64(out, ck.step);
    put_u32(out, static_cast<std::uint32_t>(ck.opt.size()));
    for (const auto& [name, data] : ck.opt) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        put_u64(out, static_cast<std::uint64_t>(data.size()));
        for (double v : data) put_f64(out, v);
    }
    put_u32(out, static_cast<std::uint32_t>(ck.rng_state.size()));
    out.append(ck.rng_state);
    put_u32(out, static_cast<std::uint32_t>(ck.config_echo.size()));
    out.append(ck.config_echo);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();

    Reader r{buf};
    if (r.str(4, "magic") != std::string(kMagic, 4))
        throw IoError("checkpoint: bad magic in " + path);
    Checkpoint ck;
    ck.version = r.u32("version");
    if (ck.version != kCheckpointVersion)
        throw IoError("checkpoint: file version " + std::to_string(ck.version) +
                      " unsupported, this build reads version " +
                      std::to_string(kCheckpointVersion));
    const std::uint32_t n_tensors = r.u32("tensor count");
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const std::uint32_t name_len = r.u32("tensor name length");
        if (name_len == 0 || name_len > kMaxName)
            throw IoError("checkpoint: implausible tensor name length");
        const std::string name = r.str(name_len, "tensor name");
        const std::uint32_t ndim = r.u32("tensor rank");
        if (ndim == 0 || ndim > kMaxDims)
            throw IoError("checkpoint: implausible rank for " + name);
        std::vector<int> shape(ndim);
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            const std::uint64_t dim = r.u64("tensor dim");
            if (dim == 0 || dim > (1u << 24))
                throw IoError("checkpoint: implausible dimension for " + name);
            shape[d] = static_cast<int>(dim);
            numel *= dim;
        }
        r.need(numel * 8, "tensor data");
        std::vector<double> data(numel);
        for (std::size_t k = 0; k < numel; ++k) data[k] = r.f64("tensor data");
        ck.tensors.emplace_back(name, Tensor::from_data(std::move(shape), std::move(data)));
    }
    ck.step = r.u64("step");
    const std::uint32_t n_opt = r.u32("optimizer buffer count");
    for (std::uint32_t i = 0; i < n_opt; ++i) {
        const std::uint32_t name_len = r.u32("optimizer name length");
        if (name_len == 0 || name_len > kMaxName)
            throw IoError("checkpoint: implausible optimizer name length");
        const std::string name = r.str(name_len, "optimizer name");
        const std::uint64_t len = r.u64("optimizer buffer length");
        r.need(len * 8, "optimizer data");
        std::vector<double> data(len);
        for (std::uint64_t k = 0; k < len; ++k) data[k] = r.f64("optimizer data");
        ck.opt.emplace_back(name, std::move(data));
    }
    ck.rng_state = r.str(r.u32("rng state length"), "rng state");
    ck.config_echo = r.str(r.u32("config echo length"), "config echo");
    if (r.at != buf.size()) throw IoError("checkpoint: trailing bytes in " + path);
    return ck;
}

void copy_params(const ParamList& dst, const Checkpoint& ck) {
    std::map<std::string, const Tensor*> index;
    for (const auto& [name, t] : ck.tensors) index[name] = &t;
    for (const auto& [name, t] : dst) {
        const auto it = index.find(name);
        if (it == index.end()) throw IoError("checkpoint: missing tensor " + name);
        if (it->second->shape() != t.shape())
            throw IoError("checkpoint: shape mismatch for " + name);
        Tensor handle = t;
        handle.mutable_data() = it->second->data();
    }
}

void store_adam(Checkpoint& ck, const ParamList& params, const AdamState& state) {
    if (state.m.size() != params.size())
        throw ContractError("store_adam: state not aligned to parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        ck.opt.emplace_back(params[i].first + "/m", state.m[i]);
        ck.opt.emplace_back(params[i].first + "/v", state.v[i]);
    }
    ck.step = state.t;
}

void load_adam(const Checkpoint& ck, const ParamList& params, AdamState& state) {
    std::map<std::string, const std::vector<double>*> index;
    for (const auto& [name, data] : ck.opt) index[name] = &data;
    state = AdamState::make(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (const char* kind : {"m", "v"}) {
            const std::string key = params[i].first + "/" + kind;
            const auto it = index.find(key);
            if (it == index.end()) throw IoError("checkpoint: missing optimizer buffer " + key);
            if (it->second->size() != params[i].second.numel())
                throw IoError("checkpoint: optimizer buffer size mismatch for " + key);
            (kind[0] == 'm' ? state.m[i] : state.v[i]) = *it->second;
        }
    }
    state.t = ck.step;
}

}  // namespace retrolens
