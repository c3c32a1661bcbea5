#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "rpm/graph.hpp"
#include "rpm/rng.hpp"

namespace rpm::nn {

using ad::BatchNormRunning;
using ad::Graph;
using ad::Param;
using ad::Var;

// Owns every parameter and batch-norm running buffer of a model in a stable
// registration order. The order determines initialization draws, optimizer
// state layout, and checkpoint layout.
class ParamStore {
public:
    Param& add(const std::string& name, Shape shape, bool trainable = true);
    BatchNormRunning& add_running(const std::string& name, int channels);

    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    BatchNormRunning& running(const std::string& name);

    std::vector<Param*> params();                 // registration order
    std::vector<const Param*> params() const;
    std::vector<std::pair<std::string, BatchNormRunning*>> runnings();

    void zero_grad();
    std::size_t total_size() const;

    // Fan-in scaled uniform init for every trainable parameter, in
    // registration order. Batch-norm scale starts at 1, shift at 0.
    void init_params(Rng& rng);

private:
    std::vector<std::unique_ptr<Param>> owned_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::pair<std::string, std::unique_ptr<BatchNormRunning>>> running_;
    std::unordered_map<std::string, std::size_t> running_index_;
};

// Layer wrappers bind names in a ParamStore at construction and apply
// themselves on a Graph. They hold no tensors, so a model object stays
// copy-free and the store remains the single source of truth.

struct Linear {
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in_features, int out_features,
           bool bias = true);
    Var apply(Graph& g, Var x) const;

    Param* w = nullptr;
    Param* b = nullptr;
};

struct Conv2d {
    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
           int pad, bool bias = true);
    Var apply(Graph& g, Var x) const;

    Param* w = nullptr;
    Param* b = nullptr;
    int stride = 1, pad = 0;
};

struct ConvTranspose2d {
    ConvTranspose2d() = default;
    ConvTranspose2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k,
                    int stride, int pad, bool bias = true);
    Var apply(Graph& g, Var x) const;

    Param* w = nullptr;
    Param* b = nullptr;
    int stride = 1, pad = 0;
};

struct BatchNorm2d {
    BatchNorm2d() = default;
    BatchNorm2d(ParamStore& ps, const std::string& name, int channels);
    // group: samples per statistics group when training.
    Var apply(Graph& g, Var x, int group, bool training) const;

    Param* gamma = nullptr;
    Param* beta = nullptr;
    BatchNormRunning* run = nullptr;
};

}  // namespace rpm::nn
