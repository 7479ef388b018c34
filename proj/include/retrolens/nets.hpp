#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "retrolens/degrade.hpp"
#include "retrolens/image.hpp"
#include "retrolens/rng.hpp"
#include "retrolens/tensor.hpp"

namespace retrolens {

// Named trainable tensors in a stable order; the unit the optimizer,
// checkpointing, and freezing all operate on.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

std::size_t param_count(const ParamList& params);
// FNV-1a over the raw bit patterns of every parameter value, in list order.
std::uint64_t param_checksum(const ParamList& params);

// Sets requires_grad=false on every listed parameter for the guard's lifetime
// and restores the previous flags on destruction. Frozen parameters still
// carry gradients *through* their ops but accumulate none themselves.
class FreezeGuard {
public:
    explicit FreezeGuard(const ParamList& params);
    ~FreezeGuard();
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    std::vector<std::pair<Tensor, bool>> saved_;
};

// Ordered per-layer discriminator activations exposed for feature matching.
struct ActivationStack {
    std::vector<Tensor> layers;
};

// Reparameterized latent draw: z = mu + exp(0.5*logvar) ⊙ eps, eps recorded.
struct LatentCode {
    Tensor mu, logvar, z, eps;
};

Tensor sample_z(const Tensor& mu, const Tensor& logvar, const Tensor& eps);
// Standard-normal noise as a grad-disabled tensor.
Tensor gaussian_like(const std::vector<int>& shape, Rng& rng);

struct NetConfig {
    int image_channels = 3;
    int base = 32;       // first encoder width; the second stage doubles it
    int latent = 64;     // C_z; must be even (theta/phi embed at C_z/2)
    int map_blocks = 4;  // residual blocks per mapping branch
    int disc_base = 32;  // image discriminator first width
    int unet_base = 16;  // detector first width
    void validate() const;
};

// ---- building blocks ----

struct Conv2dLayer {
    Tensor w, b;
    int stride = 1;
    int pad = 0;
    // gain scales 1/sqrt(fan_in): sqrt(2) ahead of leaky_relu, 1 for linear outputs.
    static Conv2dLayer make(int c_in, int c_out, int k, int stride, int pad,
                            double gain, Rng& rng);
    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct InstanceNormLayer {
    Tensor gamma, beta;
    static InstanceNormLayer make(int c);
    Tensor forward(const Tensor& x) const { return instance_norm(x, gamma, beta, 1e-5); }
    void collect(const std::string& prefix, ParamList& out) const;
};

// conv -> instance norm -> leaky_relu(0.2)
struct ConvBlock {
    Conv2dLayer c;
    InstanceNormLayer n;
    static ConvBlock make(int c_in, int c_out, int k, int stride, int pad, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// nearest x2 upsample -> 3x3 conv -> instance norm -> leaky_relu(0.2)
struct UpBlock {
    Conv2dLayer c;
    InstanceNormLayer n;
    static UpBlock make(int c_in, int c_out, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// x + IN(conv(lrelu(IN(conv(x))))), channel-preserving 3x3 convs
struct ResBlock {
    Conv2dLayer c1, c2;
    InstanceNormLayer n1, n2;
    static ResBlock make(int c, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// ---- VAE (encoder + generator pair) ----

struct Vae {
    // encoder: two stride-2 conv blocks, two residual blocks, 1x1 heads
    ConvBlock e1, e2;
    ResBlock er1, er2;
    Conv2dLayer head_mu, head_logvar;
    // generator: 1x1 in, two residual blocks, two upsample blocks, 3x3 out
    ConvBlock g1;
    ResBlock gr1, gr2;
    UpBlock u1, u2;
    Conv2dLayer g_out;
    int image_channels = 3;
    int latent = 64;

    static Vae make(const NetConfig& cfg, std::uint64_t seed);
    // Draws eps ~ N(0,I) from rng. Input dims must be divisible by 4.
    LatentCode encode(const Tensor& image, Rng& rng) const;
    LatentCode encode_with_eps(const Tensor& image, const Tensor& eps) const;
    // eps = 0, z = mu: the deterministic code used at inference.
    LatentCode encode_det(const Tensor& image) const;
    // [0,1] image of 4x the latent's spatial size.
    Tensor decode(const Tensor& z) const;
    ParamList params(const std::string& prefix) const;
};

// ---- partial nonlocal block ----

struct NonlocalBlock {
    Conv2dLayer theta, phi, mu_embed, nu;  // 1x1 embeddings
    static NonlocalBlock make(int c, Rng& rng);
    void collect(const std::string& prefix, ParamList& out) const;
};

// Mask-aware attention over feature positions. F is [N,C,h,w]; mask is a
// grad-disabled [N,1,h,w] tensor with 1 marking defect positions, which are
// excluded as keys/values (their affinity columns are exactly zero) while
// every position, masked or not, is kept as a query. If `affinities` is
// given, the per-sample HW x HW affinity matrices are copied into it.
Tensor partial_nonlocal(const Tensor& F, const Tensor& mask, const NonlocalBlock& blk,
                        std::vector<std::vector<double>>* affinities = nullptr);

// ---- latent mapping network ----

struct MappingNet {
    std::vector<ResBlock> local_blocks;
    NonlocalBlock nl;
    std::vector<ResBlock> global_blocks;
    int latent = 64;

    static MappingNet make(const NetConfig& cfg, std::uint64_t seed);
    Tensor local_branch(const Tensor& z) const;
    Tensor global_branch(const Tensor& z, const Tensor& mask) const;
    // Mask-guided fusion: defect positions take the global branch, intact
    // positions the local branch (bit-identical to local_branch there).
    // With an all-zero mask the global branch is skipped entirely.
    Tensor forward(const Tensor& z, const Tensor& mask) const;
    ParamList params(const std::string& prefix) const;
};

// ---- discriminators ----

// 3-layer strided patch classifier; first layer unnormalized. Exposes the
// two hidden activations and the logit map for feature matching.
struct PatchDisc {
    Conv2dLayer c1, c2, c3;
    InstanceNormLayer n2;
    static PatchDisc make(int in_channels, int base, std::uint64_t seed);
    Tensor forward(const Tensor& x, ActivationStack* acts = nullptr) const;
    ParamList params(const std::string& prefix) const;
};

// 3-layer classifier on latent mu maps, one scalar score per sample.
struct LatentDisc {
    Conv2dLayer c1, c2, c3;
    InstanceNormLayer n2;
    static LatentDisc make(int latent, int base, std::uint64_t seed);
    Tensor forward(const Tensor& z_mu) const;
    ParamList params(const std::string& prefix) const;
};

// ---- detection U-Net ----

struct Unet {
    ConvBlock enc1, down1, enc2, down2, bott;
    UpBlock up2, up1;
    ConvBlock dec2, dec1;
    Conv2dLayer out_conv;
    static Unet make(const NetConfig& cfg, std::uint64_t seed);
    // [N,C,H,W] -> [N,1,H,W] logits; H, W divisible by 4.
    Tensor forward(const Tensor& image) const;
    ParamList params(const std::string& prefix) const;
};

// ---- mask plumbing and end-to-end restoration ----

// Binary defect mask pooled to latent resolution: a 4x4 cell is marked
// defect if any of its pixels is. Returns a grad-disabled [1,1,h/4,w/4].
Tensor latent_mask(const DefectMask& mask);
// Replicate a [N,1,h,w] mask across c channels (grad-disabled).
Tensor expand_mask_channels(const Tensor& mask, int c);
// Batch of same-shaped images as one grad-disabled [N,C,H,W] tensor.
Tensor image_batch(const std::vector<Image>& images);

// G_Y(T(E_RX(r).mu)): deterministic restoration. Inputs with dims not
// divisible by 4 are reflect-padded, restored, and cropped back.
Image restore(const Image& input, const Vae& vae1, const MappingNet& mapper,
              const Vae& vae2, const DefectMask& mask);

}  // namespace retrolens
