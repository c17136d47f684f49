#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "rled/errors.hpp"

namespace rled {

enum class VSource { f_v, f_u };
enum class TvVariant { anisotropic, isotropic };

// Architecture hyperparameters. The channel schedule of the U-structure is
// derived from `c` (widths c, 2c, 4c, 8c down the encoder, back to 2c at
// full resolution).
struct ModelConfig {
    int c = 32;         // base channel width
    int rank = 8;       // latent subspace rank r
    int n_enc = 4;      // CST layers per encoder/decoder stage
    int n_frb = 4;      // CST layers in the refine block
    int window = 8;     // attention window side
    int heads_sab = 4;
    int heads_cab = 4;
    int mlp_ratio = 4;
    int levels = 4;
    bool enable_lsrb = true;
    bool enable_sab = true;
    bool enable_cab = true;
    bool rel_pos_bias = true;
    VSource v_source = VSource::f_v;

    // Spatial extents must be divisible by this before entering the network.
    std::int64_t pad_multiple() const {
        return static_cast<std::int64_t>(window) << (levels - 1);
    }

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LossConfig {
    double lambda_tv = 0.1;
    int ssim_window = 11;
    double ssim_sigma = 1.5;
    double ssim_c1 = 0.01 * 0.01;
    double ssim_c2 = 0.03 * 0.03;
    TvVariant tv_variant = TvVariant::anisotropic;

    void validate() const;
};

struct DegradeConfig {
    double sigma = 10.0; // Gaussian std on the 0..255 scale
    double gamma = 2.2;  // darkening exponent
    double gain = 0.2;   // multiplicative dimming in (0,1]
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainConfig {
    std::int64_t iterations = 500;
    int batch_size = 1;
    int patch_size = 64;
    std::int64_t eval_interval = 100;
    std::int64_t checkpoint_interval = 0; // 0 = final checkpoint only
    std::uint64_t seed = 1;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 0.0; // 0 = disabled
    bool augment_hflip = false;

    void validate() const;
};

// Flat view over every tunable, loadable from `key = value` files with `#`
// comments. Unknown keys are rejected.
struct CliConfig {
    ModelConfig model;
    LossConfig loss;
    DegradeConfig degrade;
    TrainConfig train;

    void set(const std::string& key, const std::string& value);
    void load_file(const std::string& path);
    void validate() const;
};

std::string to_string(VSource v);
std::string to_string(TvVariant v);

// Canonical text encoding of a ModelConfig (sorted keys, one per line);
// embedded in checkpoints and comparable across runs.
std::string encode_model_config(const ModelConfig& cfg);
ModelConfig decode_model_config(const std::string& text);

} // namespace rled
