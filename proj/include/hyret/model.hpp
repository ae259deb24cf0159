#pragma once

#include <array>
#include <string>
#include <vector>

#include "hyret/change_map.hpp"
#include "hyret/fdm.hpp"
#include "hyret/layers.hpp"

namespace hyret {

inline constexpr int kScales = 4;
inline constexpr int kInputMultiple = 32;

struct ModelConfig {
    int stem_width = 16;
    std::array<int, kScales> backbone_widths{16, 32, 64, 64};
    int fdm_width = 64;
    int heads = 4;
    int head_dim = 16;
    double theta_base = 10000.0;
    bool renormalize = false;
    std::array<int, 2> decoder_widths{32, 16};
    int tconv_kernel = 2;
    // Ablation switches. use_attention selects a plain softmax-attention
    // global branch (decay disabled) and excludes use_grb.
    bool use_msf = true;
    bool use_lfb = true;
    bool use_grb = true;
    bool use_lg = true;
    bool use_attention = false;
    bool fdm_norm = false;
    int num_classes = 2;

    void validate() const;
    FdmOptions fdm_options() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class AblationRow { baseline, msf, msf_lfb, msf_grb, msf_lfb_grb, full };

inline constexpr std::array<AblationRow, 6> kAblationRows = {AblationRow::baseline,    AblationRow::msf,
                                                              AblationRow::msf_lfb,     AblationRow::msf_grb,
                                                              AblationRow::msf_lfb_grb, AblationRow::full};

std::string ablation_row_name(AblationRow row);
// Applies a row's switches on top of `base` (widths etc. are kept).
ModelConfig ablation_config(const ModelConfig& base, AblationRow row);

// Features at strides 4, 8, 16, 32.
template <typename T>
struct FeaturePyramid {
    std::array<Tensor<T>, kScales> levels;
};

// Conv3x3 -> BatchNorm -> ReLU.
template <typename T>
struct ConvBnRelu {
    Conv2d<T> conv;
    BatchNorm2d<T> bn;

    struct Cache {
        Tensor<T> x;
        Tensor<T> conv_out;
        ops::BatchNormCache<T> bn;
        Tensor<T> bn_out;
    };

    ConvBnRelu() = default;
    ConvBnRelu(const std::string& name, int in, int out, int stride)
        : conv(name + ".conv", in, out, 3, stride, 1), bn(name + ".bn", out) {}

    Tensor<T> forward(const Tensor<T>& x, bool training, Cache* cache);
    Tensor<T> backward(const Cache& cache, const Tensor<T>& dy);
};

// Stem (stride 2) plus four stages, each entered with a stride-2 conv.
template <typename T>
class Backbone {
public:
    struct Cache {
        typename ConvBnRelu<T>::Cache stem;
        std::array<typename ConvBnRelu<T>::Cache, kScales> a;
        std::array<typename ConvBnRelu<T>::Cache, kScales> b;
    };

    Backbone() = default;
    explicit Backbone(const ModelConfig& cfg);

    FeaturePyramid<T> forward(const Tensor<T>& image, bool training, Cache* cache = nullptr);
    // Gradients for unused levels may be empty tensors.
    Tensor<T> backward(const Cache& cache, const std::array<Tensor<T>, kScales>& d_levels);

    void init(Rng& rng);
    void collect(ParamList<T>& out);
    void collect_state(StateList<T>& out);

private:
    ConvBnRelu<T> stem_;
    std::array<ConvBnRelu<T>, kScales> stage_a_;
    std::array<ConvBnRelu<T>, kScales> stage_b_;
};

// Two stride-2 transpose convs, a residual conv block, then 1x1 to classes.
template <typename T>
class Decoder {
public:
    struct Cache {
        Tensor<T> x;
        Tensor<T> up1_pre;
        Tensor<T> up1;
        Tensor<T> up2_pre;
        Tensor<T> up2;
        Tensor<T> res_a_pre;
        Tensor<T> res_a;
        Tensor<T> res_sum;
        Tensor<T> res_out;
    };

    Decoder() = default;
    Decoder(const ModelConfig& cfg, int in_channels);

    Tensor<T> forward(const Tensor<T>& x, Cache* cache = nullptr) const;
    Tensor<T> backward(const Cache& cache, const Tensor<T>& dy);

    void init(Rng& rng);
    void collect(ParamList<T>& out);
    void collect_state(StateList<T>& out);

private:
    TransposeConv2d<T> up1_;
    TransposeConv2d<T> up2_;
    Conv2d<T> res_a_;
    Conv2d<T> res_b_;
    Conv2d<T> classifier_;
};

template <typename T>
class ChangeDetector {
public:
    explicit ChangeDetector(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    void init(Rng& rng);
    void set_training(bool training) { training_ = training; }
    bool training() const { return training_; }

    // Siamese pyramids of both images; the pair runs through the backbone as
    // one stacked batch.
    std::pair<FeaturePyramid<T>, FeaturePyramid<T>> backbone_forward(const Tensor<T>& pre, const Tensor<T>& post);

    // Logits [N, num_classes, H, W]. Caches activations for backward().
    Tensor<T> forward(const Tensor<T>& pre, const Tensor<T>& post);
    // Forward without keeping activations; backward() is not available after it.
    Tensor<T> infer(const Tensor<T>& pre, const Tensor<T>& post);
    // Accumulates into parameter gradients; returns (d_pre, d_post).
    std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& d_logits);

    ParamList<T> params();
    StateList<T> state();
    void zero_grad();

    bool uses_scale(int s) const { return cfg_.use_msf || s == kScales - 1; }
    FdmParams<T>& fdm(int s) { return fdm_[s]; }
    Conv2d<T>& projection(int s) { return proj_[s]; }

private:
    struct Cache {
        int batch = 0;
        Shape input;
        typename Backbone<T>::Cache backbone;
        std::array<Tensor<T>, kScales> levels;
        std::array<FdmCache<T>, kScales> fdm;
        std::array<Shape, kScales> diff_shape;
        typename Decoder<T>::Cache decoder;
    };

    Tensor<T> run(const Tensor<T>& pre, const Tensor<T>& post, Cache* cache);

    ModelConfig cfg_;
    bool training_ = false;
    Backbone<T> backbone_;
    std::array<Conv2d<T>, kScales> proj_;
    std::array<FdmParams<T>, kScales> fdm_;
    Decoder<T> decoder_;
    Cache cache_;
};

// M = argmax over the two logit channels, ties to class 0.
template <typename T>
ChangeMap predict_mask(const Tensor<T>& logits);

void check_input_size(int height, int width);

} // namespace hyret
