#include "retrolens/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "retrolens/errors.hpp"

namespace retrolens {

namespace {

constexpr double kSlope = 0.2;

Tensor normal_param(std::vector<int> shape, double stddev, Rng& rng) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    std::vector<double> data(n);
    for (auto& v : data) v = stddev * rng.normal();
    return Tensor::param(std::move(shape), std::move(data));
}

int reflect_index(int i, int n) {
    if (i < n) return i;
    if (n == 1) return 0;
    int r = 2 * n - 2 - i;
    return r < 0 ? 0 : r;
}

}  // namespace

std::size_t param_count(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

std::uint64_t param_checksum(const ParamList& params) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t len) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, t] : params) {
        mix(name.data(), name.size());
        for (double v : t.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            mix(&bits, sizeof bits);
        }
    }
    return h;
}

FreezeGuard::FreezeGuard(const ParamList& params) {
    saved_.reserve(params.size());
    for (const auto& [name, t] : params) {
        saved_.emplace_back(t, t.requires_grad());
        Tensor handle = t;
        handle.set_requires_grad(false);
    }
}

FreezeGuard::~FreezeGuard() {
    // Reverse order so a tensor listed twice ends up with its original flag.
    for (auto it = saved_.rbegin(); it != saved_.rend(); ++it)
        it->first.set_requires_grad(it->second);
}

Tensor sample_z(const Tensor& mu, const Tensor& logvar, const Tensor& eps) {
    if (mu.shape() != logvar.shape() || mu.shape() != eps.shape())
        throw ShapeError("sample_z: mu/logvar/eps shapes differ");
    return add(mu, mul(exp_t(scale(logvar, 0.5)), eps));
}

Tensor gaussian_like(const std::vector<int>& shape, Rng& rng) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    std::vector<double> data(n);
    for (auto& v : data) v = rng.normal();
    return Tensor::from_data(shape, std::move(data));
}

void NetConfig::validate() const {
    if (image_channels != 1 && image_channels != 3)
        throw ValueError("NetConfig: image_channels must be 1 or 3");
    if (base < 1 || disc_base < 1 || unet_base < 1)
        throw ValueError("NetConfig: widths must be positive");
    if (latent < 2 || latent % 2 != 0)
        throw ValueError("NetConfig: latent must be even and >= 2");
    if (map_blocks < 1) throw ValueError("NetConfig: map_blocks must be >= 1");
}

// ---- building blocks ----

Conv2dLayer Conv2dLayer::make(int c_in, int c_out, int k, int stride, int pad,
                              double gain, Rng& rng) {
    Conv2dLayer layer;
    const double stddev = gain / std::sqrt(static_cast<double>(c_in) * k * k);
    layer.w = normal_param({c_out, c_in, k, k}, stddev, rng);
    layer.b = Tensor::param({c_out}, std::vector<double>(static_cast<std::size_t>(c_out), 0.0));
    layer.stride = stride;
    layer.pad = pad;
    return layer;
}

void Conv2dLayer::collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + "/w", w);
    out.emplace_back(prefix + "/b", b);
}

InstanceNormLayer InstanceNormLayer::make(int c) {
    InstanceNormLayer layer;
    const auto n = static_cast<std::size_t>(c);
    layer.gamma = Tensor::param({c}, std::vector<double>(n, 1.0));
    layer.beta = Tensor::param({c}, std::vector<double>(n, 0.0));
    return layer;
}

void InstanceNormLayer::collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + "/gamma", gamma);
    out.emplace_back(prefix + "/beta", beta);
}

ConvBlock ConvBlock::make(int c_in, int c_out, int k, int stride, int pad, Rng& rng) {
    ConvBlock blk;
    blk.c = Conv2dLayer::make(c_in, c_out, k, stride, pad, std::sqrt(2.0), rng);
    blk.n = InstanceNormLayer::make(c_out);
    return blk;
}

Tensor ConvBlock::forward(const Tensor& x) const {
    return leaky_relu(n.forward(c.forward(x)), kSlope);
}

void ConvBlock::collect(const std::string& prefix, ParamList& out) const {
    c.collect(prefix + "/conv", out);
    n.collect(prefix + "/norm", out);
}

UpBlock UpBlock::make(int c_in, int c_out, Rng& rng) {
    UpBlock blk;
    blk.c = Conv2dLayer::make(c_in, c_out, 3, 1, 1, std::sqrt(2.0), rng);
    blk.n = InstanceNormLayer::make(c_out);
    return blk;
}

Tensor UpBlock::forward(const Tensor& x) const {
    return leaky_relu(n.forward(upsample_conv(x, c.w, c.b)), kSlope);
}

void UpBlock::collect(const std::string& prefix, ParamList& out) const {
    c.collect(prefix + "/conv", out);
    n.collect(prefix + "/norm", out);
}

ResBlock ResBlock::make(int c, Rng& rng) {
    ResBlock blk;
    blk.c1 = Conv2dLayer::make(c, c, 3, 1, 1, std::sqrt(2.0), rng);
    blk.n1 = InstanceNormLayer::make(c);
    blk.c2 = Conv2dLayer::make(c, c, 3, 1, 1, 1.0, rng);
    blk.n2 = InstanceNormLayer::make(c);
    return blk;
}

Tensor ResBlock::forward(const Tensor& x) const {
    Tensor h = leaky_relu(n1.forward(c1.forward(x)), kSlope);
    return add(x, n2.forward(c2.forward(h)));
}

void ResBlock::collect(const std::string& prefix, ParamList& out) const {
    c1.collect(prefix + "/conv1", out);
    n1.collect(prefix + "/norm1", out);
    c2.collect(prefix + "/conv2", out);
    n2.collect(prefix + "/norm2", out);
}

// ---- VAE ----

Vae Vae::make(const NetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Vae v;
    v.image_channels = cfg.image_channels;
    v.latent = cfg.latent;
    const int b = cfg.base, b2 = 2 * cfg.base, cz = cfg.latent;
    auto with = [seed](const char* name, auto&& build) {
        Rng r(seed_for(seed, name));
        return build(r);
    };

    v.e1 = with("e1", [&](Rng& r) { return ConvBlock::make(cfg.image_channels, b, 4, 2, 1, r); });
    v.e2 = with("e2", [&](Rng& r) { return ConvBlock::make(b, b2, 4, 2, 1, r); });
    v.er1 = with("er1", [&](Rng& r) { return ResBlock::make(b2, r); });
    v.er2 = with("er2", [&](Rng& r) { return ResBlock::make(b2, r); });
    v.head_mu = with("head_mu", [&](Rng& r) { return Conv2dLayer::make(b2, cz, 1, 1, 0, 1.0, r); });
    v.head_logvar =
        with("head_logvar", [&](Rng& r) { return Conv2dLayer::make(b2, cz, 1, 1, 0, 1.0, r); });

    v.g1 = with("g1", [&](Rng& r) { return ConvBlock::make(cz, b2, 1, 1, 0, r); });
    v.gr1 = with("gr1", [&](Rng& r) { return ResBlock::make(b2, r); });
    v.gr2 = with("gr2", [&](Rng& r) { return ResBlock::make(b2, r); });
    v.u1 = with("u1", [&](Rng& r) { return UpBlock::make(b2, b, r); });
    v.u2 = with("u2", [&](Rng& r) { return UpBlock::make(b, b, r); });
    v.g_out =
        with("g_out", [&](Rng& r) { return Conv2dLayer::make(b, cfg.image_channels, 3, 1, 1, 1.0, r); });
    return v;
}

namespace {

std::pair<Tensor, Tensor> encode_heads(const Vae& v, const Tensor& image) {
    if (image.ndim() != 4) throw ShapeError("encode: need [N,C,H,W]");
    if (image.dim(1) != v.image_channels) throw ShapeError("encode: channel mismatch");
    if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0)
        throw ShapeError("encode: spatial dims must be divisible by 4");
    Tensor h = v.e1.forward(image);
    h = v.e2.forward(h);
    h = v.er1.forward(h);
    h = v.er2.forward(h);
    return {v.head_mu.forward(h), v.head_logvar.forward(h)};
}

}  // namespace

LatentCode Vae::encode(const Tensor& image, Rng& rng) const {
    auto [mu, logvar] = encode_heads(*this, image);
    LatentCode code;
    code.mu = mu;
    code.logvar = logvar;
    code.eps = gaussian_like(mu.shape(), rng);
    code.z = sample_z(mu, logvar, code.eps);
    return code;
}

LatentCode Vae::encode_with_eps(const Tensor& image, const Tensor& eps) const {
    auto [mu, logvar] = encode_heads(*this, image);
    LatentCode code;
    code.mu = mu;
    code.logvar = logvar;
    code.eps = eps;
    code.z = sample_z(mu, logvar, eps);
    return code;
}

LatentCode Vae::encode_det(const Tensor& image) const {
    auto [mu, logvar] = encode_heads(*this, image);
    LatentCode code;
    code.mu = mu;
    code.logvar = logvar;
    code.eps = Tensor::zeros(mu.shape());
    code.z = mu;
    return code;
}

Tensor Vae::decode(const Tensor& z) const {
    if (z.ndim() != 4) throw ShapeError("decode: need [N,C_z,h,w]");
    if (z.dim(1) != latent) throw ShapeError("decode: latent channel mismatch");
    Tensor h = g1.forward(z);
    h = gr1.forward(h);
    h = gr2.forward(h);
    h = u1.forward(h);
    h = u2.forward(h);
    Tensor t = tanh_t(g_out.forward(h));
    return scale(add_scalar(t, 1.0), 0.5);
}

ParamList Vae::params(const std::string& prefix) const {
    ParamList out;
    e1.collect(prefix + "/e1", out);
    e2.collect(prefix + "/e2", out);
    er1.collect(prefix + "/er1", out);
    er2.collect(prefix + "/er2", out);
    head_mu.collect(prefix + "/head_mu", out);
    head_logvar.collect(prefix + "/head_logvar", out);
    g1.collect(prefix + "/g1", out);
    gr1.collect(prefix + "/gr1", out);
    gr2.collect(prefix + "/gr2", out);
    u1.collect(prefix + "/u1", out);
    u2.collect(prefix + "/u2", out);
    g_out.collect(prefix + "/g_out", out);
    return out;
}

// ---- partial nonlocal ----

NonlocalBlock NonlocalBlock::make(int c, Rng& rng) {
    if (c < 2 || c % 2 != 0) throw ValueError("NonlocalBlock: channels must be even");
    NonlocalBlock blk;
    blk.theta = Conv2dLayer::make(c, c / 2, 1, 1, 0, 1.0, rng);
    blk.phi = Conv2dLayer::make(c, c / 2, 1, 1, 0, 1.0, rng);
    blk.mu_embed = Conv2dLayer::make(c, c / 2, 1, 1, 0, 1.0, rng);
    blk.nu = Conv2dLayer::make(c / 2, c, 1, 1, 0, 1.0, rng);
    return blk;
}

void NonlocalBlock::collect(const std::string& prefix, ParamList& out) const {
    theta.collect(prefix + "/theta", out);
    phi.collect(prefix + "/phi", out);
    mu_embed.collect(prefix + "/mu", out);
    nu.collect(prefix + "/nu", out);
}

Tensor partial_nonlocal(const Tensor& F, const Tensor& mask, const NonlocalBlock& blk,
                        std::vector<std::vector<double>>* affinities) {
    if (F.ndim() != 4) throw ShapeError("partial_nonlocal: F must be [N,C,h,w]");
    if (mask.ndim() != 4 || mask.dim(0) != F.dim(0) || mask.dim(1) != 1 ||
        mask.dim(2) != F.dim(2) || mask.dim(3) != F.dim(3))
        throw ShapeError("partial_nonlocal: mask must be [N,1,h,w] matching F");
    const int n = F.dim(0), h = F.dim(2), w = F.dim(3);
    const int hw = h * w;
    const auto& md = mask.data();
    for (int s = 0; s < n; ++s) {
        bool any_clear = false;
        for (int i = 0; i < hw && !any_clear; ++i)
            any_clear = md[static_cast<std::size_t>(s) * hw + i] == 0.0;
        if (!any_clear)
            throw FullyMaskedError("partial_nonlocal: every position is masked");
    }

    Tensor th = blk.theta.forward(F);
    Tensor ph = blk.phi.forward(F);
    Tensor vals = blk.mu_embed.forward(F);
    const int ce = th.dim(1), cv = vals.dim(1);

    if (affinities) affinities->clear();
    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s) {
        Tensor q = transpose2d(reshape(slice_batch(th, s), {ce, hw}));  // [hw, ce]
        Tensor k = reshape(slice_batch(ph, s), {ce, hw});               // [ce, hw]
        Tensor logits = matmul(q, k);                                   // f_{i,j} pre-exp

        std::vector<double> bias(static_cast<std::size_t>(hw) * hw, 0.0);
        for (int j = 0; j < hw; ++j)
            if (md[static_cast<std::size_t>(s) * hw + j] != 0.0)
                for (int i = 0; i < hw; ++i)
                    bias[static_cast<std::size_t>(i) * hw + j] = kMaskBias;
        Tensor aff = softmax_rows(logits, Tensor::from_data({hw, hw}, std::move(bias)));
        if (affinities) affinities->push_back(aff.data());

        Tensor v = transpose2d(reshape(slice_batch(vals, s), {cv, hw}));  // [hw, cv]
        Tensor o = transpose2d(matmul(aff, v));                           // [cv, hw]
        outs.push_back(reshape(o, {1, cv, h, w}));
    }
    return blk.nu.forward(concat_batch(outs));
}

// ---- mapping network ----

MappingNet MappingNet::make(const NetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    MappingNet m;
    m.latent = cfg.latent;
    for (int i = 0; i < cfg.map_blocks; ++i) {
        Rng r(seed_for(seed, "local/" + std::to_string(i)));
        m.local_blocks.push_back(ResBlock::make(cfg.latent, r));
    }
    Rng rn(seed_for(seed, "nonlocal"));
    m.nl = NonlocalBlock::make(cfg.latent, rn);
    for (int i = 0; i < cfg.map_blocks; ++i) {
        Rng r(seed_for(seed, "global/" + std::to_string(i)));
        m.global_blocks.push_back(ResBlock::make(cfg.latent, r));
    }
    return m;
}

Tensor MappingNet::local_branch(const Tensor& z) const {
    Tensor h = z;
    for (const auto& blk : local_blocks) h = blk.forward(h);
    return h;
}

Tensor MappingNet::global_branch(const Tensor& z, const Tensor& mask) const {
    Tensor h = partial_nonlocal(z, mask, nl);
    for (const auto& blk : global_blocks) h = blk.forward(h);
    return h;
}

Tensor MappingNet::forward(const Tensor& z, const Tensor& mask) const {
    if (z.ndim() != 4 || z.dim(1) != latent)
        throw ShapeError("MappingNet: z must be [N,C_z,h,w]");
    Tensor local = local_branch(z);
    bool any_defect = false;
    for (double v : mask.data())
        if (v != 0.0) {
            any_defect = true;
            break;
        }
    // Eq-10 fusion with m = 0 everywhere selects the local branch at every
    // position; the global branch would receive zero gradient, so skip it.
    if (!any_defect) return local;
    Tensor global = global_branch(z, mask);
    return select_mask(expand_mask_channels(mask, latent), global, local);
}

ParamList MappingNet::params(const std::string& prefix) const {
    ParamList out;
    for (std::size_t i = 0; i < local_blocks.size(); ++i)
        local_blocks[i].collect(prefix + "/local" + std::to_string(i), out);
    nl.collect(prefix + "/nl", out);
    for (std::size_t i = 0; i < global_blocks.size(); ++i)
        global_blocks[i].collect(prefix + "/global" + std::to_string(i), out);
    return out;
}

// ---- discriminators ----

PatchDisc PatchDisc::make(int in_channels, int base, std::uint64_t seed) {
    PatchDisc d;
    Rng r1(seed_for(seed, "c1")), r2(seed_for(seed, "c2")), r3(seed_for(seed, "c3"));
    d.c1 = Conv2dLayer::make(in_channels, base, 4, 2, 1, std::sqrt(2.0), r1);
    d.c2 = Conv2dLayer::make(base, 2 * base, 4, 2, 1, std::sqrt(2.0), r2);
    d.n2 = InstanceNormLayer::make(2 * base);
    d.c3 = Conv2dLayer::make(2 * base, 1, 4, 1, 1, 1.0, r3);
    return d;
}

Tensor PatchDisc::forward(const Tensor& x, ActivationStack* acts) const {
    Tensor a1 = leaky_relu(c1.forward(x), kSlope);
    Tensor a2 = leaky_relu(n2.forward(c2.forward(a1)), kSlope);
    Tensor out = c3.forward(a2);
    if (acts) acts->layers = {a1, a2, out};
    return out;
}

ParamList PatchDisc::params(const std::string& prefix) const {
    ParamList out;
    c1.collect(prefix + "/c1", out);
    c2.collect(prefix + "/c2", out);
    n2.collect(prefix + "/n2", out);
    c3.collect(prefix + "/c3", out);
    return out;
}

LatentDisc LatentDisc::make(int latent, int base, std::uint64_t seed) {
    LatentDisc d;
    Rng r1(seed_for(seed, "c1")), r2(seed_for(seed, "c2")), r3(seed_for(seed, "c3"));
    d.c1 = Conv2dLayer::make(latent, base, 3, 2, 1, std::sqrt(2.0), r1);
    d.c2 = Conv2dLayer::make(base, base, 3, 1, 1, std::sqrt(2.0), r2);
    d.n2 = InstanceNormLayer::make(base);
    d.c3 = Conv2dLayer::make(base, 1, 3, 1, 1, 1.0, r3);
    return d;
}

Tensor LatentDisc::forward(const Tensor& z_mu) const {
    Tensor a1 = leaky_relu(c1.forward(z_mu), kSlope);
    Tensor a2 = leaky_relu(n2.forward(c2.forward(a1)), kSlope);
    return mean_per_sample(c3.forward(a2));
}

ParamList LatentDisc::params(const std::string& prefix) const {
    ParamList out;
    c1.collect(prefix + "/c1", out);
    c2.collect(prefix + "/c2", out);
    n2.collect(prefix + "/n2", out);
    c3.collect(prefix + "/c3", out);
    return out;
}

// ---- U-Net ----

Unet Unet::make(const NetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Unet u;
    const int f = cfg.unet_base;
    auto with = [seed](const char* name, auto&& build) {
        Rng r(seed_for(seed, name));
        return build(r);
    };
    u.enc1 = with("enc1", [&](Rng& r) { return ConvBlock::make(cfg.image_channels, f, 3, 1, 1, r); });
    u.down1 = with("down1", [&](Rng& r) { return ConvBlock::make(f, 2 * f, 4, 2, 1, r); });
    u.enc2 = with("enc2", [&](Rng& r) { return ConvBlock::make(2 * f, 2 * f, 3, 1, 1, r); });
    u.down2 = with("down2", [&](Rng& r) { return ConvBlock::make(2 * f, 4 * f, 4, 2, 1, r); });
    u.bott = with("bott", [&](Rng& r) { return ConvBlock::make(4 * f, 4 * f, 3, 1, 1, r); });
    u.up2 = with("up2", [&](Rng& r) { return UpBlock::make(4 * f, 2 * f, r); });
    u.dec2 = with("dec2", [&](Rng& r) { return ConvBlock::make(4 * f, 2 * f, 3, 1, 1, r); });
    u.up1 = with("up1", [&](Rng& r) { return UpBlock::make(2 * f, f, r); });
    u.dec1 = with("dec1", [&](Rng& r) { return ConvBlock::make(2 * f, f, 3, 1, 1, r); });
    u.out_conv = with("out", [&](Rng& r) { return Conv2dLayer::make(f, 1, 3, 1, 1, 1.0, r); });
    return u;
}

Tensor Unet::forward(const Tensor& image) const {
    if (image.ndim() != 4) throw ShapeError("unet: need [N,C,H,W]");
    if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0)
        throw ShapeError("unet: spatial dims must be divisible by 4");
    Tensor x1 = enc1.forward(image);
    Tensor x2 = enc2.forward(down1.forward(x1));
    Tensor x3 = bott.forward(down2.forward(x2));
    Tensor y2 = dec2.forward(concat_channels(up2.forward(x3), x2));
    Tensor y1 = dec1.forward(concat_channels(up1.forward(y2), x1));
    return out_conv.forward(y1);
}

ParamList Unet::params(const std::string& prefix) const {
    ParamList out;
    enc1.collect(prefix + "/enc1", out);
    down1.collect(prefix + "/down1", out);
    enc2.collect(prefix + "/enc2", out);
    down2.collect(prefix + "/down2", out);
    bott.collect(prefix + "/bott", out);
    up2.collect(prefix + "/up2", out);
    dec2.collect(prefix + "/dec2", out);
    up1.collect(prefix + "/up1", out);
    dec1.collect(prefix + "/dec1", out);
    out_conv.collect(prefix + "/out", out);
    return out;
}

// ---- mask plumbing / restore ----

Tensor latent_mask(const DefectMask& mask) {
    if (mask.h % 4 != 0 || mask.w % 4 != 0)
        throw ShapeError("latent_mask: mask dims must be divisible by 4");
    const std::vector<double> bin = mask.binary();
    const int lh = mask.h / 4, lw = mask.w / 4;
    std::vector<double> cells(static_cast<std::size_t>(lh) * lw, 0.0);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            if (bin[static_cast<std::size_t>(y) * mask.w + x] != 0.0)
                cells[static_cast<std::size_t>(y / 4) * lw + x / 4] = 1.0;
    return Tensor::from_data({1, 1, lh, lw}, std::move(cells));
}

Tensor expand_mask_channels(const Tensor& mask, int c) {
    if (mask.ndim() != 4 || mask.dim(1) != 1)
        throw ShapeError("expand_mask_channels: need [N,1,h,w]");
    const int n = mask.dim(0), h = mask.dim(2), w = mask.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<double> out(static_cast<std::size_t>(n) * c * plane);
    const auto& md = mask.data();
    for (int s = 0; s < n; ++s)
        for (int ch = 0; ch < c; ++ch)
            std::copy_n(md.begin() + static_cast<std::ptrdiff_t>(s * plane), plane,
                        out.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(s) * c + ch) * plane));
    return Tensor::from_data({n, c, h, w}, std::move(out));
}

Tensor image_batch(const std::vector<Image>& images) {
    if (images.empty()) throw ValueError("image_batch: empty batch");
    const Image& head = images.front();
    for (const auto& im : images)
        if (im.c != head.c || im.h != head.h || im.w != head.w)
            throw ShapeError("image_batch: image shapes differ");
    std::vector<double> data;
    data.reserve(images.size() * head.data.size());
    for (const auto& im : images) data.insert(data.end(), im.data.begin(), im.data.end());
    return Tensor::from_data({static_cast<int>(images.size()), head.c, head.h, head.w},
                             std::move(data));
}

namespace {

Image pad_reflect(const Image& img, int hp, int wp) {
    Image out = Image::zeros(img.c, hp, wp);
    for (int c = 0; c < img.c; ++c)
        for (int y = 0; y < hp; ++y)
            for (int x = 0; x < wp; ++x)
                out.at(c, y, x) = img.data[(static_cast<std::size_t>(c) * img.h +
                                            reflect_index(y, img.h)) * img.w +
                                           reflect_index(x, img.w)];
    return out;
}

DefectMask pad_reflect(const DefectMask& mask, int hp, int wp) {
    DefectMask out = DefectMask::empty(hp, wp);
    for (int y = 0; y < hp; ++y)
        for (int x = 0; x < wp; ++x)
            out.alpha[static_cast<std::size_t>(y) * wp + x] =
                mask.alpha[static_cast<std::size_t>(reflect_index(y, mask.h)) * mask.w +
                           reflect_index(x, mask.w)];
    return out;
}

}  // namespace

Image restore(const Image& input, const Vae& vae1, const MappingNet& mapper,
              const Vae& vae2, const DefectMask& mask) {
    if (mask.h != input.h || mask.w != input.w)
        throw ShapeError("restore: mask dims must match the input image");
    const int hp = (input.h + 3) / 4 * 4, wp = (input.w + 3) / 4 * 4;
    const bool padded = hp != input.h || wp != input.w;
    Tensor x = to_tensor(padded ? pad_reflect(input, hp, wp) : input);
    Tensor lm = latent_mask(padded ? pad_reflect(mask, hp, wp) : mask);
    Tensor z = vae1.encode_det(x).mu;
    Tensor mapped = mapper.forward(z, lm);
    Image out = from_tensor(vae2.decode(mapped));
    if (!padded) return out;
    Image cropped = Image::zeros(input.c, input.h, input.w);
    for (int c = 0; c < input.c; ++c)
        for (int y = 0; y < input.h; ++y)
            for (int x2 = 0; x2 < input.w; ++x2)
                cropped.at(c, y, x2) = out.at(c, y, x2);
    return cropped;
}

}  // namespace retrolens
