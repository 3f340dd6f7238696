// SPDX-License-Identifier: Apache-2.0

#include "grass/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>

#include "grass/autodiff.hpp"
#include "grass/error.hpp"
#include "grass/rng.hpp"

namespace grass {

namespace {
constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kValStream = 2;
} // namespace

const char* dataset_kind_name(DatasetKind kind) {
    switch (kind) {
    case DatasetKind::repetition:
        return "repetition";
    case DatasetKind::planted_importance:
        return "planted_importance";
    case DatasetKind::char_corpus:
        return "char_corpus";
    }
    return "?";
}

DatasetKind parse_dataset_kind(const std::string& name) {
    for (auto k : {DatasetKind::repetition, DatasetKind::planted_importance, DatasetKind::char_corpus}) {
        if (name == dataset_kind_name(k)) {
            return k;
        }
    }
    throw ConfigError("dataset.kind: unknown kind '" + name + "'");
}

void DatasetSpec::validate(const ModelConfig& model, std::size_t seq_len) const {
    if (vocab < 2 || vocab > model.vocab_size) {
        throw ConfigError("dataset.vocab must be in [2, model.vocab_size=" + std::to_string(model.vocab_size) + "]");
    }
    if (seq_len == 0 || seq_len > model.max_seq_len) {
        throw ConfigError("seq_len must be in [1, model.max_seq_len=" + std::to_string(model.max_seq_len) + "]");
    }
    if (val_sequences == 0) {
        throw ConfigError("dataset.val_sequences must be positive");
    }
    switch (kind) {
    case DatasetKind::repetition:
        if (period == 0 || period > seq_len) {
            throw ConfigError("dataset.period must be in [1, seq_len]");
        }
        break;
    case DatasetKind::planted_importance:
        if (planted_layer >= model.n_layers) {
            throw ConfigError("dataset.planted_layer must be < model.n_layers");
        }
        if (lag == 0) {
            throw ConfigError("dataset.lag must be positive");
        }
        if (!(strength >= 0.0 && strength <= 1.0)) {
            throw ConfigError("dataset.strength must be in [0,1]");
        }
        if (seq_len <= lag) {
            throw ConfigError("planted_importance needs seq_len > dataset.lag");
        }
        break;
    case DatasetKind::char_corpus:
        if (source.empty()) {
            throw ConfigError("dataset.source is required for char_corpus");
        }
        break;
    }
}

std::vector<std::size_t> planted_windows(std::size_t n_layers, std::size_t planted_layer, std::size_t lag) {
    std::vector<std::size_t> w(n_layers, 1);
    if (planted_layer < n_layers) {
        w[planted_layer] = lag + 1;
    }
    return w;
}

std::vector<std::int32_t> encode_text(const std::string& text, std::size_t vocab) {
    std::array<std::size_t, 256> freq{};
    for (unsigned char c : text) {
        ++freq[c];
    }
    std::array<int, 256> order{};
    for (int i = 0; i < 256; ++i) {
        order[static_cast<std::size_t>(i)] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return freq[static_cast<std::size_t>(a)] > freq[static_cast<std::size_t>(b)];
    });
    std::array<std::int32_t, 256> id{};
    const auto last = static_cast<std::int32_t>(vocab - 1);
    for (std::size_t rank = 0; rank < 256; ++rank) {
        id[static_cast<std::size_t>(order[rank])] = std::min(static_cast<std::int32_t>(rank), last);
    }
    std::vector<std::int32_t> out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        out.push_back(id[c]);
    }
    return out;
}

Dataset::Dataset(DatasetSpec spec, const ModelConfig& model, std::size_t seq_len)
    : spec_(std::move(spec)), seq_len_(seq_len) {
    spec_.validate(model, seq_len);
    if (spec_.kind == DatasetKind::char_corpus) {
        std::ifstream in(spec_.source, std::ios::binary);
        if (!in) {
            throw IoError("dataset: cannot read corpus '" + spec_.source + "'");
        }
        std::ostringstream text;
        text << in.rdbuf();
        corpus_ = encode_text(text.str(), spec_.vocab);
        corpus_split_ = corpus_.size() - corpus_.size() / 10;
        if (corpus_split_ < seq_len + 1 || corpus_.size() - corpus_split_ < seq_len + 1) {
            throw InputError("dataset: corpus '" + spec_.source + "' is too short for seq_len " +
                             std::to_string(seq_len));
        }
    }
    val_ = Batch{spec_.val_sequences, seq_len_, {}, {}};
    for (std::size_t i = 0; i < spec_.val_sequences; ++i) {
        sample_sequence(Rng::mix(Rng::mix(spec_.seed, kValStream), i), true, val_);
    }
}

Batch Dataset::train_batch(std::size_t step, std::size_t batch_size) const {
    Batch b{batch_size, seq_len_, {}, {}};
    const std::uint64_t step_stream = Rng::mix(Rng::mix(spec_.seed, kTrainStream), step);
    for (std::size_t i = 0; i < batch_size; ++i) {
        sample_sequence(Rng::mix(step_stream, i), false, b);
    }
    return b;
}

void Dataset::sample_sequence(std::uint64_t stream, bool validation, Batch& out) const {
    Rng rng(stream);
    const std::size_t n = seq_len_;
    switch (spec_.kind) {
    case DatasetKind::repetition: {
        std::vector<std::int32_t> prefix(spec_.period);
        for (auto& t : prefix) {
            t = static_cast<std::int32_t>(rng.below(spec_.vocab));
        }
        for (std::size_t i = 0; i <= n; ++i) {
            const std::int32_t tok = prefix[i % spec_.period];
            if (i < n) {
                out.tokens.push_back(tok);
            }
            if (i > 0) {
                out.targets.push_back(tok);
            }
        }
        break;
    }
    case DatasetKind::planted_importance: {
        // Uniform tokens; the target at i is the marker token lag positions
        // back. Only the planted block's window reaches it.
        for (std::size_t i = 0; i < n; ++i) {
            out.tokens.push_back(static_cast<std::int32_t>(rng.below(spec_.vocab)));
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (i < spec_.lag) {
                out.targets.push_back(ops::kIgnoreIndex);
            } else if (rng.uniform() < spec_.strength) {
                out.targets.push_back(out.tokens[out.tokens.size() - n + i - spec_.lag]);
            } else {
                out.targets.push_back(static_cast<std::int32_t>(rng.below(spec_.vocab)));
            }
        }
        break;
    }
    case DatasetKind::char_corpus: {
        const std::size_t lo = validation ? corpus_split_ : 0;
        const std::size_t hi = validation ? corpus_.size() : corpus_split_;
        const std::size_t start = lo + rng.below(hi - lo - n);
        out.tokens.insert(out.tokens.end(), corpus_.begin() + static_cast<std::ptrdiff_t>(start),
                          corpus_.begin() + static_cast<std::ptrdiff_t>(start + n));
        out.targets.insert(out.targets.end(), corpus_.begin() + static_cast<std::ptrdiff_t>(start + 1),
                           corpus_.begin() + static_cast<std::ptrdiff_t>(start + n + 1));
        break;
    }
    }
}

} // namespace grass
