#include "hyret/model.hpp"

namespace hyret {

void ModelConfig::validate() const {
    auto positive = [](int v, const char* key) {
        if (v < 1) throw ConfigError(std::string("model.") + key + ": must be >= 1");
    };
    positive(stem_width, "stem_width");
    for (int w : backbone_widths) positive(w, "backbone_widths");
    for (int w : decoder_widths) positive(w, "decoder_widths");
    positive(fdm_width, "fdm_width");
    positive(heads, "heads");
    if (head_dim < 4 || head_dim % 4 != 0) throw ConfigError("model.head_dim: must be a positive multiple of 4");
    if (heads * head_dim != fdm_width) throw ConfigError("model.heads: heads * head_dim must equal fdm_width");
    if (!(theta_base > 1.0)) throw ConfigError("model.theta_base: must be > 1");
    if (tconv_kernel != 2 && tconv_kernel != 4) throw ConfigError("model.tconv_kernel: must be 2 or 4");
    if (num_classes != 2) throw ConfigError("model.num_classes: only binary change detection (2) is supported");
    if (use_grb && use_attention) throw ConfigError("model.use_attention: cannot be combined with use_grb");
    if (!use_lfb && !use_grb && !use_attention)
        throw ConfigError("model.use_lfb: disabling every FDM branch (lfb, grb, attention) is not allowed");
    if (use_lg && !(use_lfb && (use_grb || use_attention)))
        throw ConfigError("model.use_lg: the local-global interaction needs both a local and a global branch");
}

FdmOptions ModelConfig::fdm_options() const {
    FdmOptions o;
    o.use_lfb = use_lfb;
    o.global = use_grb ? GlobalBranch::retention : use_attention ? GlobalBranch::attention : GlobalBranch::none;
    o.use_lg = use_lg;
    o.use_norm = fdm_norm;
    o.retention.mode = RetentionMode::softmax_decay;
    o.retention.renormalize = renormalize;
    return o;
}

std::string ablation_row_name(AblationRow row) {
    switch (row) {
    case AblationRow::baseline: return "Baseline";
    case AblationRow::msf: return "Baseline + MSF";
    case AblationRow::msf_lfb: return "Baseline + MSF + LFB";
    case AblationRow::msf_grb: return "Baseline + MSF + GRB";
    case AblationRow::msf_lfb_grb: return "Baseline + MSF + LFB + GRB";
    case AblationRow::full: return "Baseline + MSF + LFB + GRB + LG-Interaction";
    }
    return "?";
}

ModelConfig ablation_config(const ModelConfig& base, AblationRow row) {
    ModelConfig c = base;
    c.use_msf = row != AblationRow::baseline;
    c.use_attention = row == AblationRow::baseline || row == AblationRow::msf;
    c.use_lfb = row == AblationRow::msf_lfb || row == AblationRow::msf_lfb_grb || row == AblationRow::full;
    c.use_grb = row == AblationRow::msf_grb || row == AblationRow::msf_lfb_grb || row == AblationRow::full;
    c.use_lg = row == AblationRow::full;
    return c;
}

void check_input_size(int height, int width) {
    if (height % kInputMultiple != 0 || width % kInputMultiple != 0 || height < 1 || width < 1)
        throw ShapeError("input height and width must be positive multiples of " + std::to_string(kInputMultiple) +
                         ", got " + std::to_string(height) + "x" + std::to_string(width));
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> ConvBnRelu<T>::forward(const Tensor<T>& x, bool training, Cache* cache) {
    Tensor<T> c = conv.forward(x);
    ops::BatchNormCache<T> bn_cache;
    Tensor<T> b = bn.forward(c, training, &bn_cache);
    Tensor<T> y = ops::relu(b);
    if (cache) {
        cache->x = x;
        cache->conv_out = std::move(c);
        cache->bn = std::move(bn_cache);
        cache->bn_out = std::move(b);
    }
    return y;
}

template <typename T>
Tensor<T> ConvBnRelu<T>::backward(const Cache& cache, const Tensor<T>& dy) {
    Tensor<T> d_bn = ops::relu_backward(cache.bn_out, dy);
    Tensor<T> d_conv = bn.backward(cache.bn, d_bn);
    return conv.backward(cache.x, d_conv);
}

template <typename T>
Backbone<T>::Backbone(const ModelConfig& cfg) : stem_("backbone.stem", 3, cfg.stem_width, 2) {
    int in = cfg.stem_width;
    for (int s = 0; s < kScales; ++s) {
        const int w = cfg.backbone_widths[s];
        const std::string name = "backbone.stage" + std::to_string(s + 1);
        stage_a_[s] = ConvBnRelu<T>(name + ".a", in, w, 2);
        stage_b_[s] = ConvBnRelu<T>(name + ".b", w, w, 1);
        in = w;
    }
}

template <typename T>
FeaturePyramid<T> Backbone<T>::forward(const Tensor<T>& image, bool training, Cache* cache) {
    if (image.c() != 3) throw ShapeError("backbone: expected 3 input channels, got " + std::to_string(image.c()));
    check_input_size(image.h(), image.w());
    FeaturePyramid<T> pyr;
    Tensor<T> x = stem_.forward(image, training, cache ? &cache->stem : nullptr);
    for (int s = 0; s < kScales; ++s) {
        x = stage_a_[s].forward(x, training, cache ? &cache->a[s] : nullptr);
        x = stage_b_[s].forward(x, training, cache ? &cache->b[s] : nullptr);
        pyr.levels[s] = x;
    }
    return pyr;
}

template <typename T>
Tensor<T> Backbone<T>::backward(const Cache& cache, const std::array<Tensor<T>, kScales>& d_levels) {
    Tensor<T> d;
    for (int s = kScales - 1; s >= 0; --s) {
        if (!d_levels[s].empty()) {
            if (d.empty()) d = d_levels[s];
            else d += d_levels[s];
        }
        if (d.empty()) continue;
        d = stage_b_[s].backward(cache.b[s], d);
        d = stage_a_[s].backward(cache.a[s], d);
    }
    return stem_.backward(cache.stem, d);
}

template <typename T>
void Backbone<T>::init(Rng& rng) {
    stem_.conv.init_he(rng);
    for (int s = 0; s < kScales; ++s) {
        stage_a_[s].conv.init_he(rng);
        stage_b_[s].conv.init_he(rng);
    }
}

template <typename T>
void Backbone<T>::collect(ParamList<T>& out) {
    stem_.conv.collect(out);
    stem_.bn.collect(out);
    for (int s = 0; s < kScales; ++s) {
        for (ConvBnRelu<T>* u : {&stage_a_[s], &stage_b_[s]}) {
            u->conv.collect(out);
            u->bn.collect(out);
        }
    }
}

template <typename T>
void Backbone<T>::collect_state(StateList<T>& out) {
    stem_.conv.collect_state(out);
    stem_.bn.collect_state(out);
    for (int s = 0; s < kScales; ++s) {
        for (ConvBnRelu<T>* u : {&stage_a_[s], &stage_b_[s]}) {
            u->conv.collect_state(out);
            u->bn.collect_state(out);
        }
    }
}

// ---------------------------------------------------------------------------

template <typename T>
Decoder<T>::Decoder(const ModelConfig& cfg, int in_channels)
    : up1_("decoder.up1", in_channels, cfg.decoder_widths[0], cfg.tconv_kernel),
      up2_("decoder.up2", cfg.decoder_widths[0], cfg.decoder_widths[1], cfg.tconv_kernel),
      res_a_("decoder.res.a", cfg.decoder_widths[1], cfg.decoder_widths[1], 3),
      res_b_("decoder.res.b", cfg.decoder_widths[1], cfg.decoder_widths[1], 3),
      classifier_("decoder.classifier", cfg.decoder_widths[1], cfg.num_classes, 1) {}

template <typename T>
Tensor<T> Decoder<T>::forward(const Tensor<T>& x, Cache* cache) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    c.x = x;
    c.up1_pre = up1_.forward(x);
    c.up1 = ops::relu(c.up1_pre);
    c.up2_pre = up2_.forward(c.up1);
    c.up2 = ops::relu(c.up2_pre);
    c.res_a_pre = res_a_.forward(c.up2);
    c.res_a = ops::relu(c.res_a_pre);
    c.res_sum = res_b_.forward(c.res_a);
    c.res_sum += c.up2;
    c.res_out = ops::relu(c.res_sum);
    return classifier_.forward(c.res_out);
}

template <typename T>
Tensor<T> Decoder<T>::backward(const Cache& c, const Tensor<T>& dy) {
    Tensor<T> d = classifier_.backward(c.res_out, dy);
    Tensor<T> d_sum = ops::relu_backward(c.res_sum, d);
    Tensor<T> d_res_a = res_b_.backward(c.res_a, d_sum);
    d_res_a = ops::relu_backward(c.res_a_pre, d_res_a);
    Tensor<T> d_up2 = res_a_.backward(c.up2, d_res_a);
    d_up2 += d_sum;
    d_up2 = ops::relu_backward(c.up2_pre, d_up2);
    Tensor<T> d_up1 = up2_.backward(c.up1, d_up2);
    d_up1 = ops::relu_backward(c.up1_pre, d_up1);
    return up1_.backward(c.x, d_up1);
}

template <typename T>
void Decoder<T>::init(Rng& rng) {
    up1_.init_he(rng);
    up2_.init_he(rng);
    res_a_.init_he(rng);
    res_b_.init_he(rng);
    // Second residual conv scaled down so the block starts near identity.
    for (auto& v : res_b_.weight.value.values()) v *= T(0.1);
    const double bound = 1.0 / std::sqrt(static_cast<double>(classifier_.fan_in()));
    fill_uniform(classifier_.weight.value, rng, -bound, bound);
    classifier_.bias.value.fill(T(0));
}

template <typename T>
void Decoder<T>::collect(ParamList<T>& out) {
    up1_.collect(out);
    up2_.collect(out);
    res_a_.collect(out);
    res_b_.collect(out);
    classifier_.collect(out);
}

template <typename T>
void Decoder<T>::collect_state(StateList<T>& out) {
    up1_.collect_state(out);
    up2_.collect_state(out);
    res_a_.collect_state(out);
    res_b_.collect_state(out);
    classifier_.collect_state(out);
}

// ---------------------------------------------------------------------------

template <typename T>
ChangeDetector<T>::ChangeDetector(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    backbone_ = Backbone<T>(cfg_);
    const FdmOptions options = cfg_.fdm_options();
    int used = 0;
    for (int s = 0; s < kScales; ++s) {
        if (!uses_scale(s)) continue;
        ++used;
        const std::string name = "scale" + std::to_string(s + 1);
        proj_[s] = Conv2d<T>(name + ".proj", cfg_.backbone_widths[s], cfg_.fdm_width, 1);
        fdm_[s] = FdmParams<T>(name + ".fdm", cfg_.fdm_width, cfg_.heads, cfg_.head_dim, options, cfg_.theta_base);
    }
    decoder_ = Decoder<T>(cfg_, used * cfg_.fdm_width);
}

template <typename T>
void ChangeDetector<T>::init(Rng& rng) {
    backbone_.init(rng);
    for (int s = 0; s < kScales; ++s) {
        if (!uses_scale(s)) continue;
        proj_[s].init_he(rng);
        fdm_[s].init(rng);
    }
    decoder_.init(rng);
}

template <typename T>
std::pair<FeaturePyramid<T>, FeaturePyramid<T>> ChangeDetector<T>::backbone_forward(const Tensor<T>& pre,
                                                                                    const Tensor<T>& post) {
    require_same_shape(pre.shape(), post.shape(), "image pair");
    FeaturePyramid<T> stacked = backbone_.forward(ops::stack_batch(pre, post), training_);
    std::pair<FeaturePyramid<T>, FeaturePyramid<T>> out;
    for (int s = 0; s < kScales; ++s)
        std::tie(out.first.levels[s], out.second.levels[s]) = ops::unstack_batch(stacked.levels[s], pre.n());
    return out;
}

template <typename T>
Tensor<T> ChangeDetector<T>::forward(const Tensor<T>& pre, const Tensor<T>& post) {
    return run(pre, post, &cache_);
}

template <typename T>
Tensor<T> ChangeDetector<T>::infer(const Tensor<T>& pre, const Tensor<T>& post) {
    cache_ = Cache();
    return run(pre, post, nullptr);
}

template <typename T>
Tensor<T> ChangeDetector<T>::run(const Tensor<T>& pre, const Tensor<T>& post, Cache* c) {
    require_same_shape(pre.shape(), post.shape(), "image pair");
    const int batch = pre.n();
    if (c) {
        c->batch = batch;
        c->input = pre.shape();
    }
    FeaturePyramid<T> pyr =
        backbone_.forward(ops::stack_batch(pre, post), training_, c ? &c->backbone : nullptr);

    std::vector<Tensor<T>> upsampled;
    for (int s = 0; s < kScales; ++s) {
        if (c) c->levels[s] = Tensor<T>();
        if (!uses_scale(s)) continue;
        auto [f_pre, f_post] = ops::unstack_batch(proj_[s].forward(pyr.levels[s]), batch);
        Tensor<T> diff = fdm_forward(f_pre, f_post, fdm_[s], training_, c ? &c->fdm[s] : nullptr);
        if (c) {
            c->levels[s] = std::move(pyr.levels[s]);
            c->diff_shape[s] = diff.shape();
        }
        upsampled.push_back(ops::bilinear_upsample(diff, 1 << s));
    }
    std::vector<const Tensor<T>*> parts;
    for (const auto& u : upsampled) parts.push_back(&u);
    Tensor<T> fused = ops::concat_channels<T>(parts);
    upsampled.clear();
    Tensor<T> logits = decoder_.forward(fused, c ? &c->decoder : nullptr);
    if (!logits.all_finite()) throw NumericError("model: non-finite logits");
    return logits;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> ChangeDetector<T>::backward(const Tensor<T>& d_logits) {
    Cache& c = cache_;
    if (c.batch == 0) throw std::logic_error("model: backward() without a cached forward()");
    Tensor<T> d_fused = decoder_.backward(c.decoder, d_logits);
    std::vector<int> sizes;
    for (int s = 0; s < kScales; ++s)
        if (uses_scale(s)) sizes.push_back(cfg_.fdm_width);
    auto d_parts = ops::split_channels<T>(d_fused, sizes);

    std::array<Tensor<T>, kScales> d_levels;
    int part = 0;
    for (int s = 0; s < kScales; ++s) {
        if (!uses_scale(s)) continue;
        Tensor<T> d_diff = ops::bilinear_upsample_backward(d_parts[part++], c.diff_shape[s], 1 << s);
        auto [d_pre, d_post] = fdm_backward(fdm_[s], c.fdm[s], d_diff);
        d_levels[s] = proj_[s].backward(c.levels[s], ops::stack_batch(d_pre, d_post));
    }
    Tensor<T> d_images = backbone_.backward(c.backbone, d_levels);
    return ops::unstack_batch(d_images, c.batch);
}

template <typename T>
ParamList<T> ChangeDetector<T>::params() {
    ParamList<T> out;
    backbone_.collect(out);
    for (int s = 0; s < kScales; ++s) {
        if (!uses_scale(s)) continue;
        proj_[s].collect(out);
        fdm_[s].collect(out);
    }
    decoder_.collect(out);
    return out;
}

template <typename T>
StateList<T> ChangeDetector<T>::state() {
    StateList<T> out;
    backbone_.collect_state(out);
    for (int s = 0; s < kScales; ++s) {
        if (!uses_scale(s)) continue;
        proj_[s].collect_state(out);
        fdm_[s].collect_state(out);
    }
    decoder_.collect_state(out);
    return out;
}

template <typename T>
void ChangeDetector<T>::zero_grad() {
    for (Param<T>* p : params()) p->zero_grad();
}

template <typename T>
ChangeMap predict_mask(const Tensor<T>& logits) {
    if (logits.c() != 2)
        throw ShapeError("predict_mask: expected 2 logit channels, got " + std::to_string(logits.c()));
    ChangeMap m(logits.n(), logits.h(), logits.w());
    const std::size_t plane = logits.shape().plane();
    for (int b = 0; b < logits.n(); ++b) {
        const T* l0 = logits.plane(b, 0);
        const T* l1 = logits.plane(b, 1);
        for (std::size_t i = 0; i < plane; ++i) m.labels[b * plane + i] = l1[i] > l0[i] ? 1 : 0;
    }
    return m;
}

template struct ConvBnRelu<float>;
template struct ConvBnRelu<double>;
template class Backbone<float>;
template class Backbone<double>;
template class Decoder<float>;
template class Decoder<double>;
template class ChangeDetector<float>;
template class ChangeDetector<double>;
template ChangeMap predict_mask(const Tensor<float>&);
template ChangeMap predict_mask(const Tensor<double>&);

} // namespace hyret
