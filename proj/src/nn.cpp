#include "rpm/nn.hpp"

#include <cmath>

#include "rpm/common.hpp"

namespace rpm::nn {

Param& ParamStore::add(const std::string& name, Shape shape, bool trainable) {
    if (index_.count(name)) throw ContractError("duplicate parameter: " + name);
    owned_.push_back(std::make_unique<Param>(name, Tensor(std::move(shape)), trainable));
    index_[name] = owned_.size() - 1;
    return *owned_.back();
}

BatchNormRunning& ParamStore::add_running(const std::string& name, int channels) {
    if (running_index_.count(name)) throw ContractError("duplicate running stats: " + name);
    running_.emplace_back(name, std::make_unique<BatchNormRunning>(channels));
    running_index_[name] = running_.size() - 1;
    return *running_.back().second;
}

Param& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return *owned_[it->second];
}

const Param& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return *owned_[it->second];
}

BatchNormRunning& ParamStore::running(const std::string& name) {
    auto it = running_index_.find(name);
    if (it == running_index_.end()) throw ContractError("unknown running stats: " + name);
    return *running_[it->second].second;
}

std::vector<Param*> ParamStore::params() {
    std::vector<Param*> out;
    out.reserve(owned_.size());
    for (auto& p : owned_) out.push_back(p.get());
    return out;
}

std::vector<const Param*> ParamStore::params() const {
    std::vector<const Param*> out;
    out.reserve(owned_.size());
    for (auto& p : owned_) out.push_back(p.get());
    return out;
}

std::vector<std::pair<std::string, BatchNormRunning*>> ParamStore::runnings() {
    std::vector<std::pair<std::string, BatchNormRunning*>> out;
    out.reserve(running_.size());
    for (auto& [n, r] : running_) out.emplace_back(n, r.get());
    return out;
}

void ParamStore::zero_grad() {
    for (auto& p : owned_) p->zero_grad();
}

std::size_t ParamStore::total_size() const {
    std::size_t n = 0;
    for (const auto& p : owned_) n += p->value.numel();
    return n;
}

namespace {
bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}
}  // namespace

void ParamStore::init_params(Rng& rng) {
    for (auto& p : owned_) {
        const std::string& n = p->name;
        if (ends_with(n, ".gamma")) {
            p->value.fill(1.0);
            continue;
        }
        if (ends_with(n, ".beta") || ends_with(n, ".b")) {
            p->value.fill(0.0);
            continue;
        }
        if (ends_with(n, ".log")) {
            p->value.fill(0.0);
            continue;
        }
        // Fan-in scaled uniform. Weights are [out, in, ...] except transposed
        // convolutions (".wt"), which store [in, out, k, k].
        const Shape& s = p->value.shape();
        double fan_in = 1.0;
        if (ends_with(n, ".wt") && s.size() == 4) {
            fan_in = static_cast<double>(s[0]) * s[2] * s[3];
        } else {
            for (std::size_t i = 1; i < s.size(); ++i) fan_in *= s[i];
        }
        const double bound = 1.0 / std::sqrt(fan_in);
        for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] = rng.uniform(-bound, bound);
    }
}

Linear::Linear(ParamStore& ps, const std::string& name, int in_features, int out_features,
               bool bias) {
    w = &ps.add(name + ".w", Shape{out_features, in_features});
    if (bias) b = &ps.add(name + ".b", Shape{out_features});
}

Var Linear::apply(Graph& g, Var x) const {
    return g.linear(x, g.param(*w), b ? g.param(*b) : Var{});
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, int stride_,
               int pad_, bool bias)
    : stride(stride_), pad(pad_) {
    w = &ps.add(name + ".w", Shape{out_ch, in_ch, k, k});
    if (bias) b = &ps.add(name + ".b", Shape{out_ch});
}

Var Conv2d::apply(Graph& g, Var x) const {
    return g.conv2d(x, g.param(*w), b ? g.param(*b) : Var{}, stride, pad);
}

ConvTranspose2d::ConvTranspose2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch,
                                 int k, int stride_, int pad_, bool bias)
    : stride(stride_), pad(pad_) {
    w = &ps.add(name + ".wt", Shape{in_ch, out_ch, k, k});
    if (bias) b = &ps.add(name + ".b", Shape{out_ch});
}

Var ConvTranspose2d::apply(Graph& g, Var x) const {
    return g.conv_transpose2d(x, g.param(*w), b ? g.param(*b) : Var{}, stride, pad);
}

BatchNorm2d::BatchNorm2d(ParamStore& ps, const std::string& name, int channels) {
    gamma = &ps.add(name + ".gamma", Shape{channels});
    beta = &ps.add(name + ".beta", Shape{channels});
    run = &ps.add_running(name + ".running", channels);
}

Var BatchNorm2d::apply(Graph& g, Var x, int group, bool training) const {
    return g.batchnorm2d(x, g.param(*gamma), g.param(*beta), group, training, run);
}

}  // namespace rpm::nn
