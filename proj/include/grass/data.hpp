// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic and character-level token streams.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "grass/model.hpp"

namespace grass {

enum class DatasetKind { repetition, planted_importance, char_corpus };

const char* dataset_kind_name(DatasetKind kind);
DatasetKind parse_dataset_kind(const std::string& name);

struct DatasetSpec {
    DatasetKind kind = DatasetKind::repetition;
    // Token alphabet used by the generator; must not exceed the model vocab.
    std::size_t vocab = 8;
    // repetition: a random prefix of this length repeats through the sequence.
    std::size_t period = 4;
    // planted_importance: each target copies the token `lag` positions back,
    // and planted_layer is the only block whose attention reaches that far.
    std::size_t planted_layer = 2;
    std::size_t lag = 1;
    // Probability that a target is the copied token; otherwise a uniformly
    // random token (label noise).
    double strength = 1.0;
    // char_corpus: path to a text file.
    std::string source;
    std::uint64_t seed = 0;
    std::size_t val_sequences = 64;

    void validate(const ModelConfig& model, std::size_t seq_len) const;
};

// Per-block attention windows that make planted_layer the only block able to
// move information between positions.
std::vector<std::size_t> planted_windows(std::size_t n_layers, std::size_t planted_layer, std::size_t lag);

class Dataset {
public:
    Dataset(DatasetSpec spec, const ModelConfig& model, std::size_t seq_len);

    const DatasetSpec& spec() const { return spec_; }
    std::size_t seq_len() const { return seq_len_; }

    // The training batch for a given step; a pure function of (spec, step).
    Batch train_batch(std::size_t step, std::size_t batch_size) const;
    const Batch& validation() const { return val_; }

private:
    // One sequence of seq_len tokens and targets appended to `out`.
    void sample_sequence(std::uint64_t stream, bool validation, Batch& out) const;

    DatasetSpec spec_;
    std::size_t seq_len_;
    // char_corpus: encoded text, training part then validation part.
    std::vector<std::int32_t> corpus_;
    std::size_t corpus_split_ = 0;
    Batch val_;
};

// Maps bytes to ids by frequency rank, most frequent first; bytes beyond
// vocab-1 distinct symbols share the last id.
std::vector<std::int32_t> encode_text(const std::string& text, std::size_t vocab);

} // namespace grass
