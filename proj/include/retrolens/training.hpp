#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "retrolens/degrade.hpp"
#include "retrolens/losses.hpp"
#include "retrolens/nets.hpp"

namespace retrolens {

// ------------------------------------------------------------------ optimizer

// Bias-corrected Adam with per-parameter moment buffers aligned to a
// ParamList. One state per player group (the sets updated together).
struct AdamState {
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t t = 0;
    std::vector<std::vector<double>> m, v;

    static AdamState make(const ParamList& params);
};

// One optimizer step at the given learning rate, reading each parameter's
// accumulated gradient (absent gradients count as zero). Advances the step
// counter exactly once per call. Throws TrainingDivergedError on non-finite
// gradients, naming the parameter.
void adam_step(AdamState& state, const ParamList& params, double lr);

// Scales all gradients in the list so their global L2 norm is at most
// max_norm; returns the pre-clip norm.
double clip_grad_norm(const ParamList& params, double max_norm);

// ------------------------------------------------------------------ schedule

struct TrainConfig {
    double lr = 2e-4;
    int epochs = 100;       // schedule length; iterations are mapped onto it
    int decay_start = 50;   // constant lr through this epoch (inclusive)
    int batch = 4;
    int crop = 32;          // square crop side; must be divisible by 4
    LossWeights weights;               // stage-2 weights + shared alpha
    VaeObjectiveWeights vae_weights;   // stage-1 weights and sampling switch
    NetConfig net;                     // network widths
    std::uint64_t seed = 1;
    int stage1_iters = 1000;
    int stage2_iters = 1000;
    int detector_iters = 2000;
    int detector_finetune_iters = 400;
    double grad_clip = 10.0;
    double divergence_threshold = 1e6;
    int log_every = 25;

    void validate() const;
};

// Learning rate at an epoch in [0, epochs): constant through decay_start,
// then linear decay reaching exactly 0 at the final epoch. Out-of-range
// epochs throw ValueError.
double lr_at(const TrainConfig& config, int epoch);

// ------------------------------------------------------------------ stages

// Stage I: the two VAEs with their image discriminators and the latent
// domain adversary. Each iteration runs three phases in order -- image
// discriminators, latent discriminator, encoders/generators -- each with
// its own forward pass; VAE1 consumes one r and one x batch per iteration
// while VAE2 trains independently on y.
struct Stage1Result {
    Vae vae1, vae2;
    PatchDisc d_img1, d_img2;
    LatentDisc d_latent;
    AdamState opt_vae1, opt_vae2, opt_d1, opt_d2, opt_dz;
    std::uint64_t iters = 0;
    double init_recon_y = 0.0;   // probe-batch VAE2 reconstruction L1 at init
    double final_recon_y = 0.0;  // same probe after training
    double latent_swd = 0.0;     // sliced Wasserstein between r and x codes
};

Stage1Result train_stage1(const std::vector<Image>& data_x, const std::vector<Image>& data_r,
                          const std::vector<Image>& data_y, const TrainConfig& config,
                          std::ostream* log = nullptr);

// Stage II: the latent mapping network and its image discriminator, with
// both VAEs frozen for the entire stage (verified by parameter checksum;
// drift raises ContractError).
struct Stage2Result {
    MappingNet mapper;
    PatchDisc d_t;
    AdamState opt_mapper, opt_dt;
    std::uint64_t iters = 0;
    double init_l1 = 0.0;   // held-out latent L1 before training
    double final_l1 = 0.0;  // after
};

Stage2Result train_stage2(const std::vector<DegradedPair>& pairs, const Vae& vae1,
                          const Vae& vae2, const TrainConfig& config,
                          std::ostream* log = nullptr);

// Scratch detector: phase 1 trains on synthetic pairs, phase 2 finetunes on
// pseudo-real pairs; held-out pixel AUC is reported for each phase. A
// training set with no positive mask pixels raises ValueError.
struct DetectorResult {
    Unet net;
    AdamState opt;
    std::uint64_t iters = 0;
    double auc_synthetic = 0.0;      // held-out synthetic, after phase 1
    double auc_pseudo_before = 0.0;  // held-out pseudo-real, before finetune
    double auc_pseudo_after = 0.0;   // same, after finetune
};

DetectorResult train_detector(const std::vector<DegradedPair>& synth,
                              const std::vector<DegradedPair>& pseudo_real,
                              const TrainConfig& config, std::ostream* log = nullptr);

// --------------------------------------------------------------- checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Everything needed to restart or deploy: named tensors, optimizer moment
// buffers keyed "<param>/m" and "<param>/v", the shared step counter, a
// sampler state string, and the resolved config echo.
struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    ParamList tensors;
    std::uint64_t step = 0;
    std::vector<std::pair<std::string, std::vector<double>>> opt;
    std::string rng_state;
    std::string config_echo;
};

// Binary little-endian serialization; round-trips bit-exactly. load parses
// and validates the whole file before returning, so a corrupt file leaves
// no partial state. Errors are IoError naming the offending field.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint tensors into dst by name; every dst name must be
// present with a matching shape (IoError otherwise). Extra checkpoint
// tensors are ignored so one file can hold several players.
void copy_params(const ParamList& dst, const Checkpoint& ck);

// Moment-buffer round trip for one player group.
void store_adam(Checkpoint& ck, const ParamList& params, const AdamState& state);
void load_adam(const Checkpoint& ck, const ParamList& params, AdamState& state);

}  // namespace retrolens
