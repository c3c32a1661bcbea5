#include "rpm/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "rpm/image_io.hpp"

namespace rpm::eval {

namespace {

double mse(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

double mse_u8(const std::vector<double>& a, const std::uint8_t* b, std::size_t n) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i] / 255.0;
        s += d * d;
    }
    return s / static_cast<double>(n);
}

std::vector<std::vector<double>> panel_cells(const gen::PanelDataset& ds, int p) {
    std::vector<std::vector<double>> cells(9);
    for (int k = 0; k < 9; ++k) cells[static_cast<std::size_t>(k)] = ds.cell_f64(p, k);
    return cells;
}

MetricReport summarize(const std::string& name, const std::vector<double>& values,
                       const nlohmann::json& cfg) {
    MetricReport r;
    r.metric = name;
    r.n_repeats = static_cast<int>(values.size());
    double mean = 0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0;
    for (double v : values) var += (v - mean) * (v - mean);
    r.value = mean;
    r.std_dev = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
    r.config_digest = config_digest(cfg);
    return r;
}

std::map<std::string, double> sample_concepts(const gen::DatasetSpec& spec, Rng& rng) {
    std::map<std::string, double> out;
    for (const auto& c : spec.concepts) out[c.name] = rng.uniform(c.low, c.high);
    return out;
}

}  // namespace

std::string config_digest(const nlohmann::json& j) {
    const std::uint64_t h = hash_string(j.dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

Painter model_painter(const model::LatentModel& m) {
    return [&m](const std::vector<std::vector<double>>& cells, const std::array<bool, 9>& mask,
                Rng& rng) {
        // Hidden cells are blanked before the model sees them.
        std::vector<std::vector<double>> visible = cells;
        for (int k = 0; k < 9; ++k)
            if (!mask[static_cast<std::size_t>(k)])
                std::fill(visible[static_cast<std::size_t>(k)].begin(),
                          visible[static_cast<std::size_t>(k)].end(), 0.0);
        auto inf = m.infer_missing_cells(visible, mask, rng);
        std::vector<std::vector<double>> out;
        for (auto& p : inf.predictions) out.push_back(std::move(p.image));
        return out;
    };
}

Painter oracle_painter() {
    return [](const std::vector<std::vector<double>>& cells, const std::array<bool, 9>& mask,
              Rng&) {
        std::vector<std::vector<double>> out;
        for (int k = 0; k < 9; ++k)
            if (!mask[static_cast<std::size_t>(k)]) out.push_back(cells[static_cast<std::size_t>(k)]);
        return out;
    };
}

Painter constant_painter(double value) {
    return [value](const std::vector<std::vector<double>>& cells, const std::array<bool, 9>& mask,
                   Rng&) {
        std::vector<std::vector<double>> out;
        for (int k = 0; k < 9; ++k)
            if (!mask[static_cast<std::size_t>(k)])
                out.emplace_back(cells[static_cast<std::size_t>(k)].size(), value);
        return out;
    };
}

MetricReport varying_position_mse(const Painter& painter, const gen::PanelDataset& ds,
                                  int n_panels, int repeats, std::uint64_t seed) {
    const int n = std::min(n_panels, ds.n);
    if (n <= 0) throw ContractError("varying_position_mse: no panels");
    std::vector<double> per_repeat;
    for (int r = 0; r < repeats; ++r) {
        std::vector<double> per_panel(static_cast<std::size_t>(n), 0.0);
#pragma omp parallel for schedule(static)
        for (int p = 0; p < n; ++p) {
            auto cells = panel_cells(ds, p);
            double acc = 0;
            for (int k = 0; k < 9; ++k) {
                std::array<bool, 9> mask;
                mask.fill(true);
                mask[static_cast<std::size_t>(k)] = false;
                Rng rng = Rng::derive(seed, "mse", (static_cast<std::uint64_t>(r) * ds.n + p) * 9 +
                                                       static_cast<std::uint64_t>(k));
                auto pred = painter(cells, mask, rng);
                acc += mse(pred.at(0), cells[static_cast<std::size_t>(k)]);
            }
            per_panel[static_cast<std::size_t>(p)] = acc / 9.0;
        }
        double total = 0;
        for (double v : per_panel) total += v;
        per_repeat.push_back(total / n);
    }
    return summarize("varying_position_mse", per_repeat,
                     {{"n_panels", n}, {"repeats", repeats}, {"seed", seed}});
}

nlohmann::json MultiCellReport::to_json() const {
    return {{"hidden_cells", hidden_cells}, {"cell_mse", cell_mse}, {"png", png_path}};
}

MultiCellReport multi_cell_report(const model::LatentModel& m,
                                  const std::vector<std::vector<double>>& cells,
                                  const std::array<bool, 9>& mask, const std::string& png_path,
                                  std::uint64_t seed) {
    int hidden = 0;
    for (bool v : mask) hidden += v ? 0 : 1;
    if (hidden == 0) throw ContractError("multi_cell_report: mask hides nothing");
    if (hidden == 9) throw ContractError("multi_cell_report: at least one context cell required");
    Rng rng = Rng::derive(seed, "multicell");
    auto pred = model_painter(m)(cells, mask, rng);

    MultiCellReport rep;
    img::TileGrid grid(3, 3, m.image_size(), 4);
    std::size_t pi = 0;
    for (int k = 0; k < 9; ++k) {
        if (mask[static_cast<std::size_t>(k)]) {
            grid.place(k / 3, k % 3, cells[static_cast<std::size_t>(k)], false);
        } else {
            grid.place(k / 3, k % 3, pred[pi], true);
            rep.hidden_cells.push_back(k);
            rep.cell_mse.push_back(mse(pred[pi], cells[static_cast<std::size_t>(k)]));
            ++pi;
        }
    }
    if (!png_path.empty()) {
        grid.save(png_path);
        rep.png_path = png_path;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

Encoder model_encoder(const model::LatentModel& m) {
    Encoder e;
    e.needs_images = true;
    e.fn = [&m](const std::vector<ConceptSample>& batch) {
        std::vector<std::vector<double>> imgs;
        imgs.reserve(batch.size());
        for (const auto& s : batch) imgs.push_back(s.image);
        Tensor mean, lv;
        m.encode_cells(imgs, mean, lv);
        return mean;
    };
    return e;
}

Encoder ground_truth_encoder(const gen::DatasetSpec& spec) {
    Encoder e;
    e.needs_images = false;
    std::vector<std::string> names;
    for (const auto& c : spec.concepts) names.push_back(c.name);
    e.fn = [names](const std::vector<ConceptSample>& batch) {
        Tensor out(Shape{static_cast<int>(batch.size()), static_cast<int>(names.size())});
        for (std::size_t i = 0; i < batch.size(); ++i)
            for (std::size_t j = 0; j < names.size(); ++j)
                out.at2(static_cast<int>(i), static_cast<int>(j)) = batch[i].concepts.at(names[j]);
        return out;
    };
    return e;
}

Encoder noise_encoder(int dim) {
    Encoder e;
    e.needs_images = false;
    e.fn = [dim](const std::vector<ConceptSample>& batch) {
        Tensor out(Shape{static_cast<int>(batch.size()), dim});
        for (std::size_t i = 0; i < batch.size(); ++i) {
            // Deterministic codes decorrelated from the concepts by hashing.
            std::uint64_t h = 0x9e3779b97f4a7c15ULL;
            for (const auto& [name, v] : batch[i].concepts) {
                h ^= hash_string(name);
                std::uint64_t bits;
                __builtin_memcpy(&bits, &v, 8);
                h = (h ^ bits) * 0x100000001b3ULL;
            }
            Rng rng(h);
            for (int d = 0; d < dim; ++d) out.at2(static_cast<int>(i), d) = rng.gauss();
        }
        return out;
    };
    return e;
}

Encoder random_projection_encoder(const gen::DatasetSpec& spec, int dim, std::uint64_t seed) {
    const int hw = spec.image_size * spec.image_size;
    auto proj = std::make_shared<Tensor>(Shape{dim, hw});
    Rng rng = Rng::derive(seed, "proj");
    for (std::size_t i = 0; i < proj->numel(); ++i)
        (*proj)[i] = rng.gauss() / std::sqrt(static_cast<double>(hw));
    Encoder e;
    e.needs_images = true;
    e.fn = [proj, dim, hw](const std::vector<ConceptSample>& batch) {
        Tensor out(Shape{static_cast<int>(batch.size()), dim});
        for (std::size_t i = 0; i < batch.size(); ++i) {
            for (int d = 0; d < dim; ++d) {
                double s = 0;
                for (int px = 0; px < hw; ++px)
                    s += proj->at2(d, px) * batch[i].image[static_cast<std::size_t>(px)];
                out.at2(static_cast<int>(i), d) = s;
            }
        }
        return out;
    };
    return e;
}

// ---------------------------------------------------------------------------
// Factor VAE score
// ---------------------------------------------------------------------------

namespace {

std::vector<ConceptSample> make_batch(const gen::DatasetSpec& spec, int count, Rng& rng,
                                      bool with_images, const std::string& fixed_name,
                                      double fixed_value) {
    std::vector<ConceptSample> out(static_cast<std::size_t>(count));
    for (auto& s : out) {
        s.concepts = sample_concepts(spec, rng);
        if (!fixed_name.empty()) s.concepts[fixed_name] = fixed_value;
        if (with_images) s.image = gen::render_cell(s.concepts, spec);
    }
    return out;
}

std::vector<double> latent_stds(const Encoder& enc, const gen::DatasetSpec& spec, int pool,
                                Rng& rng) {
    auto batch = make_batch(spec, pool, rng, enc.needs_images, "", 0.0);
    Tensor z = enc.fn(batch);
    const int dim = z.dim(1);
    std::vector<double> stds(static_cast<std::size_t>(dim));
    for (int d = 0; d < dim; ++d) {
        double m = 0, v = 0;
        for (int i = 0; i < z.dim(0); ++i) m += z.at2(i, d);
        m /= z.dim(0);
        for (int i = 0; i < z.dim(0); ++i) v += (z.at2(i, d) - m) * (z.at2(i, d) - m);
        stds[static_cast<std::size_t>(d)] = std::sqrt(v / z.dim(0));
    }
    return stds;
}

}  // namespace

std::vector<std::pair<int, int>> factor_vae_votes(const Encoder& enc,
                                                  const gen::DatasetSpec& spec, int n_votes,
                                                  int batch, int norm_pool, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, "factorvae");
    const std::vector<double> stds = latent_stds(enc, spec, norm_pool, rng);
    std::vector<int> active;
    for (std::size_t d = 0; d < stds.size(); ++d) {
        if (stds[d] > 1e-9) {
            active.push_back(static_cast<int>(d));
        } else {
            std::fprintf(stderr, "factor_vae_score: excluding collapsed latent dimension %zu\n", d);
        }
    }
    if (active.empty()) throw NumericalError("factor_vae_score: all latent dimensions collapsed");

    const int n_concepts = static_cast<int>(spec.concepts.size());
    std::vector<std::pair<int, int>> votes;
    votes.reserve(static_cast<std::size_t>(n_votes));
    for (int t = 0; t < n_votes; ++t) {
        const int c = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n_concepts)));
        const auto& cs = spec.concepts[static_cast<std::size_t>(c)];
        const double fixed = rng.uniform(cs.low, cs.high);
        auto b = make_batch(spec, batch, rng, enc.needs_images, cs.name, fixed);
        Tensor z = enc.fn(b);
        int best_dim = active[0];
        double best_var = std::numeric_limits<double>::infinity();
        for (int d : active) {
            double m = 0, v = 0;
            for (int i = 0; i < z.dim(0); ++i) m += z.at2(i, d);
            m /= z.dim(0);
            for (int i = 0; i < z.dim(0); ++i) v += (z.at2(i, d) - m) * (z.at2(i, d) - m);
            v = v / z.dim(0) / (stds[static_cast<std::size_t>(d)] * stds[static_cast<std::size_t>(d)]);
            if (v < best_var) {
                best_var = v;
                best_dim = d;
            }
        }
        votes.emplace_back(best_dim, c);
    }
    return votes;
}

MetricReport factor_vae_score(const Encoder& enc, const gen::DatasetSpec& spec,
                              const FactorVaeOptions& opt) {
    std::vector<double> scores;
    const int n_concepts = static_cast<int>(spec.concepts.size());
    for (int r = 0; r < opt.repeats; ++r) {
        auto votes = factor_vae_votes(enc, spec, opt.n_train + opt.n_eval, opt.batch,
                                      opt.norm_pool, opt.seed + static_cast<std::uint64_t>(r));
        // Majority table from the training votes.
        std::map<int, std::vector<int>> counts;
        for (int i = 0; i < opt.n_train; ++i) {
            auto& row = counts[votes[static_cast<std::size_t>(i)].first];
            row.resize(static_cast<std::size_t>(n_concepts), 0);
            ++row[static_cast<std::size_t>(votes[static_cast<std::size_t>(i)].second)];
        }
        std::map<int, int> table;
        for (const auto& [dim, row] : counts)
            table[dim] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        int correct = 0, total = 0;
        for (std::size_t i = static_cast<std::size_t>(opt.n_train); i < votes.size(); ++i) {
            ++total;
            auto it = table.find(votes[i].first);
            if (it != table.end() && it->second == votes[i].second) ++correct;
        }
        scores.push_back(total > 0 ? static_cast<double>(correct) / total : 0.0);
    }
    return summarize("factor_vae_score", scores,
                     {{"n_train", opt.n_train},
                      {"batch", opt.batch},
                      {"n_eval", opt.n_eval},
                      {"repeats", opt.repeats},
                      {"seed", opt.seed},
                      {"dataset", spec.name}});
}

// ---------------------------------------------------------------------------
// SAP score
// ---------------------------------------------------------------------------

Tensor sap_r2_matrix(const Encoder& enc, const gen::DatasetSpec& spec, int n_pairs,
                     std::uint64_t seed, std::vector<std::string>* concept_names) {
    Rng rng = Rng::derive(seed, "sap");
    auto batch = make_batch(spec, n_pairs, rng, enc.needs_images, "", 0.0);
    Tensor z = enc.fn(batch);
    const int dim = z.dim(1);
    const int n_concepts = static_cast<int>(spec.concepts.size());
    if (concept_names) {
        concept_names->clear();
        for (const auto& c : spec.concepts) concept_names->push_back(c.name);
    }

    Tensor r2(Shape{dim, n_concepts});
    for (int c = 0; c < n_concepts; ++c) {
        std::vector<double> v(static_cast<std::size_t>(n_pairs));
        for (int i = 0; i < n_pairs; ++i)
            v[static_cast<std::size_t>(i)] =
                batch[static_cast<std::size_t>(i)].concepts.at(spec.concepts[static_cast<std::size_t>(c)].name);
        double vm = 0;
        for (double x : v) vm += x;
        vm /= n_pairs;
        double vv = 0;
        for (double x : v) vv += (x - vm) * (x - vm);
        if (vv < 1e-12) {
            std::fprintf(stderr, "sap_score: excluding constant concept column %d\n", c);
            for (int d = 0; d < dim; ++d) r2.at2(d, c) = 0.0;
            continue;
        }
        for (int d = 0; d < dim; ++d) {
            double zm = 0;
            for (int i = 0; i < n_pairs; ++i) zm += z.at2(i, d);
            zm /= n_pairs;
            double zz = 0, zv = 0;
            for (int i = 0; i < n_pairs; ++i) {
                const double dz = z.at2(i, d) - zm;
                zz += dz * dz;
                zv += dz * (v[static_cast<std::size_t>(i)] - vm);
            }
            r2.at2(d, c) = zz < 1e-12 ? 0.0 : (zv * zv) / (zz * vv);
        }
    }
    return r2;
}

MetricReport sap_score(const Encoder& enc, const gen::DatasetSpec& spec, const SapOptions& opt) {
    std::vector<double> scores;
    for (int r = 0; r < opt.repeats; ++r) {
        Tensor r2 = sap_r2_matrix(enc, spec, opt.n_pairs, opt.seed + static_cast<std::uint64_t>(r));
        const int dim = r2.dim(0), n_concepts = r2.dim(1);
        double total = 0;
        for (int c = 0; c < n_concepts; ++c) {
            double top1 = 0, top2 = 0;
            for (int d = 0; d < dim; ++d) {
                const double v = r2.at2(d, c);
                if (v > top1) {
                    top2 = top1;
                    top1 = v;
                } else if (v > top2) {
                    top2 = v;
                }
            }
            total += top1 - top2;
        }
        scores.push_back(total / n_concepts);
    }
    return summarize("sap_score", scores,
                     {{"n_pairs", opt.n_pairs},
                      {"repeats", opt.repeats},
                      {"seed", opt.seed},
                      {"dataset", spec.name}});
}

// ---------------------------------------------------------------------------
// Selection accuracy
// ---------------------------------------------------------------------------

MetricReport selection_accuracy(const Painter& painter, const gen::SelectionDataset& ds,
                                int repeats, std::uint64_t seed) {
    if (ds.n <= 0) throw ContractError("selection_accuracy: empty dataset");
    const std::size_t hw = static_cast<std::size_t>(ds.height) * ds.width;
    std::vector<double> per_repeat;
    for (int r = 0; r < repeats; ++r) {
        std::vector<int> correct(static_cast<std::size_t>(ds.n), 0);
#pragma omp parallel for schedule(static)
        for (int p = 0; p < ds.n; ++p) {
            std::vector<std::vector<double>> cells(9);
            for (int k = 0; k < 9; ++k) {
                const std::uint8_t* src = ds.cell(p, k);
                cells[static_cast<std::size_t>(k)].resize(hw);
                for (std::size_t i = 0; i < hw; ++i) cells[static_cast<std::size_t>(k)][i] = src[i] / 255.0;
            }
            std::array<bool, 9> mask;
            mask.fill(true);
            mask[8] = false;
            Rng rng = Rng::derive(seed, "selection",
                                  static_cast<std::uint64_t>(r) * ds.n + static_cast<std::uint64_t>(p));
            auto pred = painter(cells, mask, rng);
            int best = -1;
            double best_mse = std::numeric_limits<double>::infinity();
            for (int c = 0; c < 8; ++c) {
                const double m = mse_u8(pred.at(0), ds.candidate(p, c), hw);
                if (m < best_mse) {
                    best_mse = m;
                    best = c;
                }
            }
            correct[static_cast<std::size_t>(p)] = best == ds.answers[static_cast<std::size_t>(p)] ? 1 : 0;
        }
        int total = 0;
        for (int v : correct) total += v;
        per_repeat.push_back(static_cast<double>(total) / ds.n);
    }
    return summarize("selection_accuracy", per_repeat,
                     {{"n", ds.n}, {"repeats", repeats}, {"seed", seed}});
}

MetricReport selection_accuracy_random(const gen::SelectionDataset& ds, int repeats,
                                       std::uint64_t seed) {
    std::vector<double> per_repeat;
    for (int r = 0; r < repeats; ++r) {
        Rng rng = Rng::derive(seed, "selection.random", static_cast<std::uint64_t>(r));
        int correct = 0;
        for (int p = 0; p < ds.n; ++p)
            if (static_cast<int>(rng.uniform_index(8)) == ds.answers[static_cast<std::size_t>(p)]) ++correct;
        per_repeat.push_back(static_cast<double>(correct) / ds.n);
    }
    return summarize("selection_accuracy_random", per_repeat,
                     {{"n", ds.n}, {"repeats", repeats}, {"seed", seed}});
}

// ---------------------------------------------------------------------------
// Latent traversal
// ---------------------------------------------------------------------------

TraversalGrid traverse_latents(const model::LatentModel& m, const std::vector<double>& base_image,
                               double lo, double hi, int steps, const std::string& png_path) {
    if (steps < 2) throw ContractError("traverse_latents: steps must be >= 2");
    Tensor mean, lv;
    m.encode_cells({base_image}, mean, lv);
    const int D = m.config().d_z;
    Tensor z(Shape{D * steps, D});
    for (int d = 0; d < D; ++d)
        for (int s = 0; s < steps; ++s) {
            const double offset = lo + (hi - lo) * s / (steps - 1);
            for (int j = 0; j < D; ++j)
                z.at2(d * steps + s, j) = mean.at2(0, j) + (j == d ? offset : 0.0);
        }
    TraversalGrid grid;
    grid.dims = D;
    grid.steps = steps;
    grid.images = m.decode_codes(z);
    if (!png_path.empty()) {
        img::TileGrid tg(D, steps, m.image_size(), 3);
        for (int d = 0; d < D; ++d)
            for (int s = 0; s < steps; ++s)
                tg.place(d, s, grid.images[static_cast<std::size_t>(d * steps + s)], false);
        tg.save(png_path);
    }
    return grid;
}

}  // namespace rpm::eval
