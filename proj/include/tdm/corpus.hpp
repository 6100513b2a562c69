#pragma once

// Interaction sequences from disk or from the synthetic generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "tdm/error.hpp"
#include "tdm/rng.hpp"

namespace tdm {

using ItemId = std::int32_t;

struct UserSequence {
    std::int64_t user_id = 0;
    std::vector<ItemId> items;  // chronological

    bool operator==(const UserSequence&) const = default;
};

struct RawDataset {
    std::vector<UserSequence> sequences;
    ItemId item_count = 0;
    // original_ids[dense] is the id the item had in the source file.
    std::vector<std::int64_t> original_ids;

    bool operator==(const RawDataset&) const = default;
};

// PAD and DUMMY live just past the real item range and are never serialized.
struct Vocab {
    ItemId item_count = 0;

    ItemId pad() const noexcept { return item_count; }
    ItemId dummy() const noexcept { return item_count + 1; }
    ItemId rows() const noexcept { return item_count + 2; }
    bool is_real(ItemId id) const noexcept { return id >= 0 && id < item_count; }
};

// Fixed-length, left-padded history plus the item to predict.
struct ItemSequence {
    std::vector<ItemId> slots;
    ItemId target = 0;

    bool operator==(const ItemSequence&) const = default;

    std::size_t length() const noexcept { return slots.size(); }

    // Index of the first non-PAD slot; slots.size() when all PAD.
    std::size_t first_filled(const Vocab& vocab) const noexcept {
        std::size_t i = 0;
        while (i < slots.size() && slots[i] == vocab.pad()) ++i;
        return i;
    }

    std::size_t filled_count(const Vocab& vocab) const noexcept {
        return slots.size() - first_filled(vocab);
    }

    std::vector<bool> mask(const Vocab& vocab) const {
        std::vector<bool> m(slots.size());
        for (std::size_t i = 0; i < slots.size(); ++i) m[i] = vocab.is_real(slots[i]);
        return m;
    }
};

struct SplitSpec {
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
};

struct Splits {
    RawDataset train;
    RawDataset val;
    RawDataset test;
};

struct FilterOptions {
    std::size_t min_item_freq = 5;
    std::size_t min_seq_len = 3;
};

namespace detail {

inline void filter_to_fixpoint(std::vector<std::pair<std::int64_t, std::vector<std::int64_t>>>& seqs,
                               const FilterOptions& opts) {
    for (;;) {
        std::map<std::int64_t, std::size_t> freq;
        for (const auto& [user, items] : seqs)
            for (auto it : items) ++freq[it];

        bool changed = false;
        for (auto& [user, items] : seqs) {
            const auto before = items.size();
            std::erase_if(items, [&](std::int64_t it) { return freq[it] < opts.min_item_freq; });
            changed |= items.size() != before;
        }
        const auto before = seqs.size();
        std::erase_if(seqs, [&](const auto& s) { return s.second.size() < opts.min_seq_len; });
        changed |= seqs.size() != before;
        if (!changed) return;
    }
}

inline std::size_t floor_count(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

}  // namespace detail

/// Parses `user_id<TAB>item item ...` lines, drops rare items and short
/// sequences until both filters hold at once, and remaps item ids densely in
/// ascending order of their original value.
inline RawDataset load_sequences(std::istream& in, const FilterOptions& opts = {}) {
    std::vector<std::pair<std::int64_t, std::vector<std::int64_t>>> seqs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw ParseError("missing tab separator", line_no);

        std::pair<std::int64_t, std::vector<std::int64_t>> seq;
        try {
            std::size_t used = 0;
            seq.first = std::stoll(line.substr(0, tab), &used);
            if (used != tab) throw ParseError("bad user id", line_no);
        } catch (const std::logic_error&) {
            throw ParseError("bad user id", line_no);
        }
        std::istringstream items(line.substr(tab + 1));
        std::string tok;
        while (items >> tok) {
            try {
                std::size_t used = 0;
                const auto id = std::stoll(tok, &used);
                if (used != tok.size() || id < 0) throw ParseError("bad item id '" + tok + "'", line_no);
                seq.second.push_back(id);
            } catch (const std::logic_error&) {
                throw ParseError("bad item id '" + tok + "'", line_no);
            }
        }
        seqs.push_back(std::move(seq));
    }

    detail::filter_to_fixpoint(seqs, opts);
    if (seqs.empty()) throw EmptyDatasetError("no sequences left after filtering");

    std::map<std::int64_t, ItemId> remap;
    for (const auto& [user, items] : seqs)
        for (auto it : items) remap.emplace(it, 0);
    RawDataset ds;
    for (auto& [orig, dense] : remap) {
        dense = static_cast<ItemId>(ds.original_ids.size());
        ds.original_ids.push_back(orig);
    }
    ds.item_count = static_cast<ItemId>(remap.size());
    for (const auto& [user, items] : seqs) {
        UserSequence us{user, {}};
        us.items.reserve(items.size());
        for (auto it : items) us.items.push_back(remap.at(it));
        ds.sequences.push_back(std::move(us));
    }
    return ds;
}

inline RawDataset load_sequences(const std::filesystem::path& path, const FilterOptions& opts = {}) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return load_sequences(in, opts);
}

/// Reads a file already in dense id space (as written by write_sequences)
/// without filtering or remapping.
inline RawDataset read_dense_sequences(std::istream& in, ItemId item_count) {
    RawDataset ds;
    ds.item_count = item_count;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw ParseError("missing tab separator", line_no);
        UserSequence us;
        us.user_id = std::stoll(line.substr(0, tab));
        std::istringstream items(line.substr(tab + 1));
        long long id = 0;
        while (items >> id) {
            if (id < 0 || id >= item_count) throw ParseError("item id out of range", line_no);
            us.items.push_back(static_cast<ItemId>(id));
        }
        ds.sequences.push_back(std::move(us));
    }
    return ds;
}

inline void write_sequences(std::ostream& out, const RawDataset& ds) {
    for (const auto& s : ds.sequences) {
        out << s.user_id << '\t';
        for (std::size_t i = 0; i < s.items.size(); ++i) out << (i ? " " : "") << s.items[i];
        out << '\n';
    }
}

/// Positional split in file order: floor(train*n), floor(val*n), remainder.
inline Splits chronological_split(const RawDataset& ds, const SplitSpec& spec = {}) {
    if (spec.train_fraction <= 0 || spec.val_fraction <= 0 || spec.test_fraction <= 0)
        throw ConfigError("split fractions must be positive");
    if (std::abs(spec.train_fraction + spec.val_fraction + spec.test_fraction - 1.0) > 1e-9)
        throw ConfigError("split fractions must sum to 1");
    if (ds.sequences.empty()) throw EmptyDatasetError("cannot split an empty dataset");

    const auto n = ds.sequences.size();
    const auto n_train = detail::floor_count(spec.train_fraction, n);
    const auto n_val = detail::floor_count(spec.val_fraction, n);
    if (n_train == 0 || n_val == 0 || n_train + n_val >= n)
        throw ConfigError("split of " + std::to_string(n) + " sequences leaves an empty part");

    Splits out;
    for (auto* part : {&out.train, &out.val, &out.test}) {
        part->item_count = ds.item_count;
        part->original_ids = ds.original_ids;
    }
    auto first = ds.sequences.begin();
    out.train.sequences.assign(first, first + n_train);
    out.val.sequences.assign(first + n_train, first + n_train + n_val);
    out.test.sequences.assign(first + n_train + n_val, ds.sequences.end());
    return out;
}

/// Last item becomes the target; up to `length` preceding items fill the
/// slots right-aligned, left-padded with PAD.
inline std::vector<ItemSequence> to_item_sequences(const RawDataset& ds, std::size_t length = 10) {
    if (length < 3) throw ConfigError("sequence length must be at least 3");
    const Vocab vocab{ds.item_count};
    std::vector<ItemSequence> out;
    out.reserve(ds.sequences.size());
    for (const auto& s : ds.sequences) {
        if (s.items.size() < 3) continue;
        ItemSequence seq;
        seq.target = s.items.back();
        seq.slots.assign(length, vocab.pad());
        const std::size_t hist = s.items.size() - 1;
        const std::size_t take = std::min(hist, length);
        std::copy(s.items.begin() + static_cast<std::ptrdiff_t>(hist - take),
                  s.items.begin() + static_cast<std::ptrdiff_t>(hist),
                  seq.slots.begin() + static_cast<std::ptrdiff_t>(length - take));
        out.push_back(std::move(seq));
    }
    return out;
}

struct SynthOptions {
    std::size_t n_sequences = 2000;
    ItemId n_items = 200;
    ItemId n_clusters = 10;
    std::size_t min_len = 5;
    std::size_t max_len = 11;
    std::uint64_t seed = 1;
};

inline ItemId synth_cluster_of(ItemId item, const SynthOptions& opts) {
    return item / (opts.n_items / opts.n_clusters);
}

/// Every sequence (history and target) is drawn uniformly from one cluster of
/// n_items / n_clusters consecutive ids.
inline RawDataset synth_generate(const SynthOptions& opts) {
    if (opts.n_items <= 0 || opts.n_clusters <= 0 || opts.n_items % opts.n_clusters != 0)
        throw ConfigError("n_items must be a positive multiple of n_clusters");
    if (opts.min_len < 3 || opts.max_len < opts.min_len)
        throw ConfigError("sequence lengths must satisfy 3 <= min <= max");

    const ItemId cluster_size = opts.n_items / opts.n_clusters;
    Rng rng = substream(opts.seed, "synth");
    RawDataset ds;
    ds.item_count = opts.n_items;
    ds.original_ids.resize(static_cast<std::size_t>(opts.n_items));
    std::iota(ds.original_ids.begin(), ds.original_ids.end(), 0);
    std::uniform_int_distribution<ItemId> pick_cluster(0, opts.n_clusters - 1);
    std::uniform_int_distribution<std::size_t> pick_len(opts.min_len, opts.max_len);
    std::uniform_int_distribution<ItemId> pick_item(0, cluster_size - 1);
    for (std::size_t i = 0; i < opts.n_sequences; ++i) {
        const ItemId c = pick_cluster(rng);
        UserSequence s{static_cast<std::int64_t>(i), {}};
        s.items.resize(pick_len(rng));
        for (auto& it : s.items) it = c * cluster_size + pick_item(rng);
        ds.sequences.push_back(std::move(s));
    }
    return ds;
}

/// Deletes floor(ratio * history length) uniformly chosen history items from
/// every sequence, never the target and never below three items in total.
inline RawDataset inject_missing(const RawDataset& ds, double ratio, std::uint64_t seed) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("missing ratio must lie in [0, 1)");
    RawDataset out = ds;
    Rng rng = substream(seed, "missing");
    for (auto& s : out.sequences) {
        if (s.items.size() < 3) continue;
        const std::size_t hist = s.items.size() - 1;
        const std::size_t k = std::min(detail::floor_count(ratio, hist), s.items.size() - 3);
        if (k == 0) continue;
        std::vector<std::size_t> idx(hist);
        std::iota(idx.begin(), idx.end(), 0);
        // Partial Fisher-Yates: the first k entries are the removed positions.
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, hist - 1);
            std::swap(idx[i], idx[pick(rng)]);
        }
        std::vector<bool> drop(hist, false);
        for (std::size_t i = 0; i < k; ++i) drop[idx[i]] = true;
        std::vector<ItemId> kept;
        kept.reserve(s.items.size() - k);
        for (std::size_t i = 0; i < hist; ++i)
            if (!drop[i]) kept.push_back(s.items[i]);
        kept.push_back(s.items.back());
        s.items = std::move(kept);
    }
    return out;
}

}  // namespace tdm
