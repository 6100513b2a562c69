// tdm command-line tool. Subcommands are declared in main.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tdm/tdm.hpp"

namespace fs = std::filesystem;
using namespace tdm;

namespace {

// Keys a config file may hold besides the training keys.
const std::vector<std::string> kRunKeys = {"data", "out"};

struct RunConfig {
    TrainConfig train;
    std::map<std::string, std::string> run;  // data, out
};

// Flag values for every training key, filled by CLI11 when given.
struct TrainFlags {
    std::map<std::string, std::string> values;
    std::string config_path;

    void attach(CLI::App& cmd) {
        cmd.add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
        for (const auto& [key, def] : TrainConfig{}.to_kv()) {
            auto* opt = cmd.add_option("--" + key, values[key], "default " + def);
            opt->group("Training config");
        }
    }

    std::map<std::string, std::string> given(const CLI::App& cmd) const {
        std::map<std::string, std::string> out;
        for (const auto& [key, v] : values)
            if (cmd.count("--" + key) > 0) out[key] = v;
        return out;
    }
};

RunConfig resolve_config(const std::string& path, const std::map<std::string, std::string>& flags) {
    RunConfig rc;
    if (!path.empty()) {
        for (const auto& [k, v] : parse_key_values(read_file(path))) {
            if (std::find(kRunKeys.begin(), kRunKeys.end(), k) != kRunKeys.end()) rc.run[k] = v;
            else rc.train.set(k, v);
        }
    }
    for (const auto& [k, v] : flags) rc.train.set(k, v);
    rc.train.validate();
    return rc;
}

std::string pick(const std::string& flag, const RunConfig& rc, const std::string& key) {
    if (!flag.empty()) return flag;
    const auto it = rc.run.find(key);
    if (it == rc.run.end() || it->second.empty()) throw UsageError("--" + key + " is required");
    return it->second;
}

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

void write_resolved(const fs::path& out, const std::string& command, const KeyValues& extra,
                    const std::optional<TrainConfig>& cfg) {
    KeyValues kv = {{"command", command}};
    kv.insert(kv.end(), extra.begin(), extra.end());
    if (cfg) {
        const auto t = cfg->to_kv();
        kv.insert(kv.end(), t.begin(), t.end());
    }
    write_text(out / "config.resolved.txt", format_key_values(kv));
}

std::string sequences_text(const RawDataset& ds) {
    std::ostringstream os;
    write_sequences(os, ds);
    return os.str();
}

// Data directory: train.txt, val.txt, test.txt in dense ids plus items.tsv
// mapping dense ids to the source ids.
void write_data_dir(const fs::path& out, const Splits& parts) {
    fs::create_directories(out);
    std::string items;
    for (std::size_t i = 0; i < parts.train.original_ids.size(); ++i)
        items += std::to_string(i) + "\t" + std::to_string(parts.train.original_ids[i]) + "\n";
    write_text(out / "train.txt", sequences_text(parts.train));
    write_text(out / "val.txt", sequences_text(parts.val));
    write_text(out / "test.txt", sequences_text(parts.test));
    write_text(out / "items.tsv", items);
}

ItemId read_item_count(const fs::path& dir) {
    std::istringstream in(read_file(dir / "items.tsv"));
    std::string line;
    ItemId n = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++n;
    if (n == 0) throw EmptyDatasetError("items.tsv lists no items");
    return n;
}

RawDataset read_split(const fs::path& dir, const std::string& name, ItemId items) {
    std::istringstream in(read_file(dir / (name + ".txt")));
    return read_dense_sequences(in, items);
}

ExperimentData read_data_dir(const fs::path& dir) {
    const ItemId items = read_item_count(dir);
    return {read_split(dir, "train", items), read_split(dir, "val", items), read_split(dir, "test", items)};
}

// The three splits concatenated in file order, which is the corpus they were
// cut from.
RawDataset whole_corpus(const ExperimentData& d) {
    RawDataset all = d.train;
    for (const auto* part : {&d.val, &d.test})
        all.sequences.insert(all.sequences.end(), part->sequences.begin(), part->sequences.end());
    return all;
}

std::vector<std::uint64_t> seed_list(int count) {
    if (count < 1) throw UsageError("--seeds must be at least 1");
    std::vector<std::uint64_t> s;
    for (int i = 1; i <= count; ++i) s.push_back(static_cast<std::uint64_t>(i));
    return s;
}

std::string loss_curve_csv(const Checkpoint& ck) {
    std::string out = "epoch,train_loss,val_hr@" + std::to_string(ck.config.eval_k) + "\n";
    for (std::size_t i = 0; i < ck.state.train_loss.size(); ++i)
        out += std::to_string(i + 1) + "," + format_double(ck.state.train_loss[i]) + "," +
               format_double(ck.state.val_hr[i]) + "\n";
    return out;
}

KeyValues ratio_kv(const std::vector<double>& xs, const std::string& key) {
    std::string s;
    for (double x : xs) s += (s.empty() ? "" : ",") + format_double(x);
    return {{key, s}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TDM diffusion recommender with dual-side Thompson sampling edits"};
    app.require_subcommand(1);

    // prepare
    auto* prep = app.add_subcommand("prepare", "Filter, remap and split a raw interaction file");
    std::string prep_input, prep_out;
    std::size_t min_freq = 5, min_len = 3;
    prep->add_option("--input", prep_input, "user<TAB>items file")->required();
    prep->add_option("--out", prep_out, "output data directory")->required();
    prep->add_option("--min-item-freq", min_freq, "drop items seen fewer times")->capture_default_str();
    prep->add_option("--min-seq-len", min_len, "drop shorter sequences")->capture_default_str();

    // synth
    auto* syn = app.add_subcommand("synth", "Generate the synthetic cluster dataset");
    SynthOptions so;
    double syn_missing = 0.0;
    std::string syn_out;
    syn->add_option("--sequences", so.n_sequences)->capture_default_str();
    syn->add_option("--items", so.n_items)->capture_default_str();
    syn->add_option("--clusters", so.n_clusters)->capture_default_str();
    syn->add_option("--missing-ratio", syn_missing, "fraction of each history to delete")->capture_default_str();
    syn->add_option("--seed", so.seed)->capture_default_str();
    syn->add_option("--out", syn_out, "output data directory")->required();

    // train
    auto* tr = app.add_subcommand("train", "Train a model; checkpoints after every epoch");
    TrainFlags tr_flags;
    std::string tr_data, tr_out;
    bool tr_resume = false;
    int tr_stop = 0;
    tr_flags.attach(*tr);
    tr->add_option("--data", tr_data, "data directory");
    tr->add_option("--out", tr_out, "run directory");
    tr->add_flag("--resume", tr_resume, "continue from <out>/model.ckpt with its stored config");
    tr->add_option("--stop-after", tr_stop, "stop once this many epochs are complete");

    // eval
    auto* ev = app.add_subcommand("eval", "Score a checkpoint on a split");
    std::string ev_ckpt, ev_data, ev_split = "test", ev_out;
    int ev_k = 20, ev_seeds = 5;
    std::vector<double> ev_w;
    bool ev_cosine = false;
    ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingFile);
    ev->add_option("--data", ev_data, "data directory")->required();
    ev->add_option("--split", ev_split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
    ev->add_option("--k", ev_k)->capture_default_str();
    ev->add_option("--w", ev_w, "guidance strengths (default: the checkpoint's)")->delimiter(',');
    ev->add_option("--seeds", ev_seeds, "number of generation seeds, 1..N")->capture_default_str();
    ev->add_flag("--cosine", ev_cosine, "retrieve by cosine instead of inner product");
    ev->add_option("--out", ev_out, "directory for metrics.csv")->required();

    // ablate
    auto* ab = app.add_subcommand("ablate", "Train and score the ablation variants");
    TrainFlags ab_flags;
    std::string ab_data, ab_out;
    std::vector<std::string> ab_variants = ablation_variants();
    int ab_seeds = 5;
    ab_flags.attach(*ab);
    ab->add_option("--data", ab_data, "data directory");
    ab->add_option("--out", ab_out, "output directory");
    ab->add_option("--variants", ab_variants, "comma-separated variant names")->delimiter(',');
    ab->add_option("--seeds", ab_seeds)->capture_default_str();

    // sweep-missing
    auto* sw = app.add_subcommand("sweep-missing", "Train and score at increasing missing ratios");
    TrainFlags sw_flags;
    std::string sw_data, sw_out;
    std::vector<std::string> sw_variants = {"Base", "TDM"};
    std::vector<double> sw_ratios = {0.1, 0.2, 0.3};
    int sw_seeds = 5;
    sw_flags.attach(*sw);
    sw->add_option("--data", sw_data, "data directory holding the undamaged corpus");
    sw->add_option("--out", sw_out, "output directory");
    sw->add_option("--variants", sw_variants)->delimiter(',');
    sw->add_option("--ratios", sw_ratios)->delimiter(',');
    sw->add_option("--seeds", sw_seeds)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*prep) {
            if (!fs::exists(prep_input)) throw Error("input file not found: " + prep_input);
            const RawDataset ds = load_sequences(fs::path(prep_input), FilterOptions{min_freq, min_len});
            const Splits parts = chronological_split(ds);
            (void)to_item_sequences(parts.train);
            write_data_dir(prep_out, parts);
            write_resolved(prep_out, "prepare",
                           {{"input", prep_input},
                            {"out", prep_out},
                            {"min_item_freq", std::to_string(min_freq)},
                            {"min_seq_len", std::to_string(min_len)}},
                           std::nullopt);
            std::printf("prepared %zu sequences over %d items: train %zu, val %zu, test %zu\n", ds.sequences.size(),
                        ds.item_count, parts.train.sequences.size(), parts.val.sequences.size(),
                        parts.test.sequences.size());
        } else if (*syn) {
            RawDataset ds = synth_generate(so);
            if (syn_missing > 0.0) ds = inject_missing(ds, syn_missing, so.seed);
            const Splits parts = chronological_split(ds);
            write_data_dir(syn_out, parts);
            write_resolved(syn_out, "synth",
                           {{"sequences", std::to_string(so.n_sequences)},
                            {"items", std::to_string(so.n_items)},
                            {"clusters", std::to_string(so.n_clusters)},
                            {"missing_ratio", format_double(syn_missing)},
                            {"seed", std::to_string(so.seed)},
                            {"out", syn_out}},
                           std::nullopt);
            std::size_t total = 0;
            for (const auto& s : ds.sequences) total += s.items.size();
            std::printf("synthesized %zu sequences over %d items, mean length %.3f\n", ds.sequences.size(),
                        ds.item_count, static_cast<double>(total) / static_cast<double>(ds.sequences.size()));
        } else if (*tr) {
            const auto flags = tr_flags.given(*tr);
            const RunConfig rc = resolve_config(tr_flags.config_path, flags);
            const fs::path data = pick(tr_data, rc, "data"), out = pick(tr_out, rc, "out");
            const ExperimentData d = read_data_dir(data);
            const fs::path ckpt_path = out / "model.ckpt";
            Checkpoint ck;
            if (tr_resume) {
                if (!flags.empty() || !tr_flags.config_path.empty())
                    throw UsageError("--resume uses the stored config; drop --config and training flags");
                ck = load_checkpoint(ckpt_path);
            } else {
                ck = initial_checkpoint(rc.train, d.train.item_count);
            }
            fs::create_directories(out);
            write_resolved(out, "train", {{"data", data.string()}, {"out", out.string()}}, ck.config);
            TrainOptions opts;
            opts.on_epoch = [](int e, double loss, double hr) {
                std::printf("epoch %d loss %.6f val_hr %.4f\n", e, loss, hr);
                std::fflush(stdout);
            };
            // One epoch per call so a checkpoint lands on disk after each.
            while (!ck.state.finished && ck.state.epoch < ck.config.epochs) {
                if (tr_stop > 0 && ck.state.epoch >= tr_stop) break;
                opts.stop_after_epoch = ck.state.epoch + 1;
                ck = train(std::move(ck), d.train, d.val, opts);
                save_checkpoint(ck, ckpt_path);
                write_text(out / "loss_curve.csv", loss_curve_csv(ck));
            }
            save_checkpoint(ck, ckpt_path);
            write_text(out / "loss_curve.csv", loss_curve_csv(ck));
            std::printf("%s after epoch %d, best epoch %d, best val HR@%d %.4f\n",
                        ck.state.finished ? "finished" : "stopped", ck.state.epoch, ck.state.best_epoch,
                        ck.config.eval_k, ck.state.best_hr);
        } else if (*ev) {
            const Checkpoint ck = load_checkpoint(ev_ckpt);
            const ExperimentData d = read_data_dir(ev_data);
            const RawDataset& split = ev_split == "train" ? d.train : ev_split == "val" ? d.val : d.test;
            if (ev_w.empty()) ev_w = {ck.config.w};
            const auto seeds = seed_list(ev_seeds);
            const std::string ks = std::to_string(ev_k);
            std::string csv = "w,seed,hr@" + ks + ",ndcg@" + ks + ",n\n";
            char buf[256];
            for (double w : ev_w) {
                GenerationConfig gen = ck.config.generation(0);
                gen.w = w;
                const Metrics m = evaluate(ck, split, ev_k, gen, seeds,
                                           ev_cosine ? Similarity::cosine : Similarity::inner_product);
                for (std::size_t i = 0; i < seeds.size(); ++i) {
                    std::snprintf(buf, sizeof buf, "%s,%llu,%.6f,%.6f,%zu\n", format_double(w).c_str(),
                                  static_cast<unsigned long long>(seeds[i]), m.per_seed[i].hr, m.per_seed[i].ndcg,
                                  m.per_seed[i].n);
                    csv += buf;
                }
                if (seeds.size() > 1) {
                    std::snprintf(buf, sizeof buf, "%s,mean,%.6f,%.6f,%zu\n", format_double(w).c_str(), m.hr, m.ndcg,
                                  m.n);
                    csv += buf;
                }
                std::printf("w %-5s HR@%d %.4f (sd %.4f)  NDCG@%d %.4f (sd %.4f)  n %zu\n", format_double(w).c_str(),
                            ev_k, m.hr, m.hr_std, ev_k, m.ndcg, m.ndcg_std, m.n);
            }
            fs::create_directories(ev_out);
            write_text(fs::path(ev_out) / "metrics.csv", csv);
            KeyValues extra = {{"checkpoint", ev_ckpt}, {"data", ev_data},     {"split", ev_split},
                               {"k", ks},               {"seeds", std::to_string(ev_seeds)}, {"out", ev_out},
                               {"similarity", ev_cosine ? "cosine" : "inner_product"}};
            const auto wkv = ratio_kv(ev_w, "w_list");
            extra.insert(extra.end(), wkv.begin(), wkv.end());
            write_resolved(ev_out, "eval", extra, ck.config);
        } else if (*ab) {
            const RunConfig rc = resolve_config(ab_flags.config_path, ab_flags.given(*ab));
            const fs::path data = pick(ab_data, rc, "data"), out = pick(ab_out, rc, "out");
            const ExperimentData d = read_data_dir(data);
            const auto seeds = seed_list(ab_seeds);
            const auto rows = with_mean_rows(ablation_run(rc.train, ab_variants, d, seeds));
            fs::create_directories(out);
            write_text(out / "ablation.csv", metrics_csv(rows, rc.train.eval_k));
            std::string names;
            for (const auto& v : ab_variants) names += (names.empty() ? "" : ",") + v;
            write_resolved(out, "ablate",
                           {{"data", data.string()}, {"out", out.string()}, {"variants", names},
                            {"seeds", std::to_string(ab_seeds)}},
                           rc.train);
            std::fputs(metrics_table(rows, rc.train.eval_k).c_str(), stdout);
        } else if (*sw) {
            const RunConfig rc = resolve_config(sw_flags.config_path, sw_flags.given(*sw));
            const fs::path data = pick(sw_data, rc, "data"), out = pick(sw_out, rc, "out");
            for (const auto& v : sw_variants) (void)apply_variant(rc.train, v);
            const RawDataset corpus = whole_corpus(read_data_dir(data));
            const auto seeds = seed_list(sw_seeds);
            std::vector<MetricRow> rows;
            for (const auto& v : sw_variants) {
                const auto part = robustness_sweep(rc.train, v, sw_ratios, corpus, {}, seeds);
                rows.insert(rows.end(), part.begin(), part.end());
            }
            rows = with_mean_rows(rows);
            fs::create_directories(out);
            write_text(out / "sweep.csv", metrics_csv(rows, rc.train.eval_k));
            std::string names;
            for (const auto& v : sw_variants) names += (names.empty() ? "" : ",") + v;
            KeyValues extra = {{"data", data.string()}, {"out", out.string()}, {"variants", names},
                               {"seeds", std::to_string(sw_seeds)}};
            const auto rkv = ratio_kv(sw_ratios, "ratios");
            extra.insert(extra.end(), rkv.begin(), rkv.end());
            write_resolved(out, "sweep-missing", extra, rc.train);
            std::fputs(metrics_table(rows, rc.train.eval_k).c_str(), stdout);
        }
    } catch (const ParseError& e) {
        std::fprintf(stderr, "error: %s (line %zu)\n", e.what(), e.line());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
