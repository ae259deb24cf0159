#include "hyret/fdm.hpp"

namespace hyret {

template <typename T>
Tensor<T> lg_interaction(const Tensor<T>& local, const Tensor<T>& global, const Conv2d<T>& fuse,
                         LgCache<T>* cache) {
    require_same_shape(local.shape(), global.shape(), "lg_interaction");
    Tensor<T> sig_local = ops::sigmoid(local);
    Tensor<T> sig_global = ops::sigmoid(global);
    Tensor<T> l2g = ops::mul(sig_local, global);
    Tensor<T> g2l = ops::mul(sig_global, local);
    Tensor<T> fused = ops::concat_channels(l2g, g2l);
    Tensor<T> y = fuse.forward(fused);
    if (cache) {
        cache->local = local;
        cache->global = global;
        cache->sig_local = std::move(sig_local);
        cache->sig_global = std::move(sig_global);
        cache->fused = std::move(fused);
    }
    return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> lg_interaction_backward(Conv2d<T>& fuse, const LgCache<T>& cache,
                                                        const Tensor<T>& dy) {
    Tensor<T> d_fused = fuse.backward(cache.fused, dy);
    const int c = cache.local.c();
    const int sizes[] = {c, c};
    auto parts = ops::split_channels<T>(d_fused, sizes);
    const Tensor<T>& d_l2g = parts[0];
    const Tensor<T>& d_g2l = parts[1];
    Tensor<T> d_local(cache.local.shape());
    Tensor<T> d_global(cache.global.shape());
    for (std::size_t i = 0; i < d_local.size(); ++i) {
        const T sl = cache.sig_local[i];
        const T sg = cache.sig_global[i];
        d_local[i] = d_l2g[i] * cache.global[i] * sl * (1 - sl) + d_g2l[i] * sg;
        d_global[i] = d_l2g[i] * sl + d_g2l[i] * cache.local[i] * sg * (1 - sg);
    }
    return {std::move(d_local), std::move(d_global)};
}

void validate_fdm_options(const FdmOptions& options) {
    const bool global = options.global != GlobalBranch::none;
    if (!options.use_lfb && !global) throw ConfigError("fdm: at least one of the local or global branches is required");
    if (options.use_lg && !(options.use_lfb && global))
        throw ConfigError("fdm: the local-global interaction needs both the local and the global branch");
}

template <typename T>
FdmParams<T>::FdmParams(const std::string& name, int channels, int heads, int head_dim, const FdmOptions& opts,
                        double theta_base)
    : options(opts),
      fuse_in(name + ".fuse_in", 2 * channels, channels, 1),
      lfb(name + ".lfb", channels),
      grb(name + ".grb", channels, heads, head_dim, theta_base),
      fuse_out(name + ".fuse_out", 2 * channels, channels, 1) {
    validate_fdm_options(options);
    if (options.use_norm) norm.emplace(name + ".norm", channels);
    if (options.global == GlobalBranch::attention) grb.set_uniform_gamma(1.0);
}

template <typename T>
void FdmParams<T>::init(Rng& rng) {
    fuse_in.init_he(rng);
    lfb.init(rng);
    grb.init(rng);
    fuse_out.init_he(rng);
}

template <typename T>
void FdmParams<T>::collect(ParamList<T>& out) {
    fuse_in.collect(out);
    if (norm) norm->collect(out);
    if (has_local()) lfb.collect(out);
    if (has_global()) grb.collect(out);
    if (has_fusion()) fuse_out.collect(out);
}

template <typename T>
void FdmParams<T>::collect_state(StateList<T>& out) {
    fuse_in.collect_state(out);
    if (norm) norm->collect_state(out);
    if (has_local()) lfb.collect_state(out);
    if (has_global()) grb.collect_state(out);
    if (has_fusion()) fuse_out.collect_state(out);
}

template <typename T>
Tensor<T> fdm_forward(const Tensor<T>& x_pre, const Tensor<T>& x_post, FdmParams<T>& p, bool training,
                      FdmCache<T>* cache) {
    require_same_shape(x_pre.shape(), x_post.shape(), "fdm pre/post features");
    if (x_pre.c() != p.channels())
        throw ShapeError("fdm: feature channels " + std::to_string(x_pre.c()) + " != " + std::to_string(p.channels()));
    FdmCache<T> local_cache;
    FdmCache<T>& c = cache ? *cache : local_cache;

    c.stacked = ops::concat_channels(x_pre, x_post);
    Tensor<T> z = p.fuse_in.forward(c.stacked);
    if (p.norm) {
        c.fused_pre_norm = std::move(z);
        z = p.norm->forward(c.fused_pre_norm, training, &c.norm);
    }

    Tensor<T> local, global;
    if (p.has_local()) local = lfb_forward(z, p.lfb, &c.lfb);
    if (p.has_global()) global = retention_parallel(z, p.grb, p.options.retention, &c.grb);

    Tensor<T> out;
    if (!p.has_fusion()) {
        out = p.has_local() ? std::move(local) : std::move(global);
    } else if (p.options.use_lg) {
        out = lg_interaction(local, global, p.fuse_out, &c.lg);
    } else {
        c.merged = ops::concat_channels(local, global);
        out = p.fuse_out.forward(c.merged);
    }
    c.z = std::move(z);
    if (!out.all_finite()) throw NumericError("fdm: non-finite output");
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> fdm_backward(FdmParams<T>& p, const FdmCache<T>& cache, const Tensor<T>& dy) {
    Tensor<T> d_local, d_global;
    if (!p.has_fusion()) {
        (p.has_local() ? d_local : d_global) = dy;
    } else if (p.options.use_lg) {
        std::tie(d_local, d_global) = lg_interaction_backward(p.fuse_out, cache.lg, dy);
    } else {
        Tensor<T> d_merged = p.fuse_out.backward(cache.merged, dy);
        const int c = p.channels();
        const int sizes[] = {c, c};
        auto parts = ops::split_channels<T>(d_merged, sizes);
        d_local = std::move(parts[0]);
        d_global = std::move(parts[1]);
    }

    Tensor<T> dz(cache.z.shape());
    if (p.has_local()) dz += lfb_backward(p.lfb, cache.lfb, d_local);
    if (p.has_global()) dz += retention_parallel_backward(p.grb, cache.grb, d_global);
    if (p.norm) dz = p.norm->backward(cache.norm, dz);

    Tensor<T> d_stacked = p.fuse_in.backward(cache.stacked, dz);
    const int c = p.channels();
    const int sizes[] = {c, c};
    auto parts = ops::split_channels<T>(d_stacked, sizes);
    return {std::move(parts[0]), std::move(parts[1])};
}

#define HYRET_INSTANTIATE_FDM(T)                                                                                 \
    template struct FdmParams<T>;                                                                                \
    template Tensor<T> lg_interaction(const Tensor<T>&, const Tensor<T>&, const Conv2d<T>&, LgCache<T>*);        \
    template std::pair<Tensor<T>, Tensor<T>> lg_interaction_backward(Conv2d<T>&, const LgCache<T>&,              \
                                                                     const Tensor<T>&);                          \
    template Tensor<T> fdm_forward(const Tensor<T>&, const Tensor<T>&, FdmParams<T>&, bool, FdmCache<T>*);       \
    template std::pair<Tensor<T>, Tensor<T>> fdm_backward(FdmParams<T>&, const FdmCache<T>&, const Tensor<T>&);

HYRET_INSTANTIATE_FDM(float)
HYRET_INSTANTIATE_FDM(double)

} // namespace hyret
