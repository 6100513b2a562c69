#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "tdm/tdm.hpp"

namespace fs = std::filesystem;
using namespace tdm;

namespace {

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);)
        if (!l.empty()) out.push_back(l);
    return out;
}

class Cli : public ::testing::Test {
protected:
    static fs::path root_;

    static void SetUpTestSuite() {
        root_ = fs::temp_directory_path() / ("tdm_cli_test_" + std::to_string(::getpid()));
        fs::remove_all(root_);
        fs::create_directories(root_);
        const auto r = run("synth --sequences 300 --items 50 --clusters 5 --seed 4 --out " + (root_ / "data").string());
        ASSERT_EQ(r.code, 0) << r.err;
        std::ofstream(root_ / "small.cfg") << "# small model\ndim = 16\nT = 100\nS = 10\nepochs = 3\n"
                                              "learning_rate = 5e-3\nbatch_size = 32\neval_k = 10\n"
                                           << "data = " << (root_ / "data").string() << "\n";
    }

    static void TearDownTestSuite() { fs::remove_all(root_); }

    static Result run(const std::string& args) {
        const char* exe = std::getenv("TDM_CLI");
        if (exe == nullptr) throw std::runtime_error("TDM_CLI is not set");
        static int counter = 0;
        const std::string tag = std::to_string(::getpid()) + "_" + std::to_string(counter++);
        const auto out = fs::temp_directory_path() / ("tdm_cli_out_" + tag);
        const auto err = fs::temp_directory_path() / ("tdm_cli_err_" + tag);
        const std::string cmd = std::string(exe) + " " + args + " >" + out.string() + " 2>" + err.string();
        const int status = std::system(cmd.c_str());
        Result r{WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
        fs::remove(out);
        fs::remove(err);
        return r;
    }

    static fs::path path(const std::string& name) { return root_ / name; }
    static std::string cfg() { return "--config " + path("small.cfg").string(); }
};

fs::path Cli::root_;

}  // namespace

TEST_F(Cli, PrepareWritesFourFilesDeterministically) {
    // Original ids 100..149, so the remap is visible.
    {
        std::ofstream raw(path("raw.txt"));
        for (const auto& l : lines(slurp(path("data") / "train.txt"))) {
            const auto tab = l.find('\t');
            raw << l.substr(0, tab) << '\t';
            std::istringstream items(l.substr(tab + 1));
            for (int id; items >> id;) raw << id + 100 << ' ';
            raw << '\n';
        }
    }
    for (const char* out : {"prep1", "prep2"}) {
        const auto r = run("prepare --input " + path("raw.txt").string() + " --out " + path(out).string());
        ASSERT_EQ(r.code, 0) << r.err;
    }
    for (const char* f : {"train.txt", "val.txt", "test.txt", "items.tsv"}) {
        ASSERT_TRUE(fs::exists(path("prep1") / f)) << f;
        EXPECT_EQ(slurp(path("prep1") / f), slurp(path("prep2") / f)) << f;
    }
    EXPECT_TRUE(fs::exists(path("prep1") / "config.resolved.txt"));
    EXPECT_EQ(lines(slurp(path("prep1") / "items.tsv")).front(), "0\t100");
}

TEST_F(Cli, PrepareFailsOnMissingInput) {
    const auto r = run("prepare --input " + path("no_such_file").string() + " --out " + path("prep_bad").string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("not found"), std::string::npos);
    EXPECT_FALSE(fs::exists(path("prep_bad") / "train.txt"));
}

TEST_F(Cli, SynthIsDeterministicAndShortensHistories) {
    const auto a = run("synth --sequences 300 --items 50 --clusters 5 --seed 4 --out " + path("syn_a").string());
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_NE(a.out.find("synthesized 300 sequences"), std::string::npos);
    for (const char* f : {"train.txt", "val.txt", "test.txt", "items.tsv"})
        EXPECT_EQ(slurp(path("syn_a") / f), slurp(path("data") / f)) << f;

    const auto m = run("synth --sequences 300 --items 50 --clusters 5 --seed 4 --missing-ratio 0.3 --out " +
                       path("syn_m").string());
    ASSERT_EQ(m.code, 0) << m.err;
    const auto full = lines(slurp(path("data") / "train.txt"));
    const auto cut = lines(slurp(path("syn_m") / "train.txt"));
    ASSERT_EQ(full.size(), cut.size());
    auto count = [](const std::string& l) {
        std::istringstream in(l.substr(l.find('\t') + 1));
        std::size_t n = 0;
        for (int id; in >> id;) ++n;
        return n;
    };
    for (std::size_t i = 0; i < full.size(); ++i) {
        const std::size_t n = count(full[i]);
        EXPECT_EQ(count(cut[i]), n - std::min<std::size_t>(static_cast<std::size_t>(0.3 * (n - 1) + 1e-9), n - 3));
    }
}

TEST_F(Cli, TrainWritesCheckpointCurveAndResolvedConfig) {
    const auto r = run("train " + cfg() + " --out " + path("run").string());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(path("run") / "model.ckpt").substr(0, 4), "TDM1");
    const auto curve = lines(slurp(path("run") / "loss_curve.csv"));
    ASSERT_EQ(curve.size(), 4u);
    EXPECT_EQ(curve[0], "epoch,train_loss,val_hr@10");
    const auto resolved = parse_key_values(slurp(path("run") / "config.resolved.txt"));
    const auto has = [&](const std::string& k, const std::string& v) {
        return std::find(resolved.begin(), resolved.end(), std::pair<std::string, std::string>{k, v}) != resolved.end();
    };
    EXPECT_TRUE(has("dim", "16"));
    EXPECT_TRUE(has("lambda1", "0.5"));  // default filled in
    EXPECT_TRUE(has("command", "train"));
}

TEST_F(Cli, FlagsOverrideTheConfigFile) {
    const auto r = run("train " + cfg() + " --epochs 1 --dim 8 --out " + path("override").string());
    ASSERT_EQ(r.code, 0) << r.err;
    const Checkpoint ck = load_checkpoint(path("override") / "model.ckpt");
    EXPECT_EQ(ck.config.model.dim, 8);
    EXPECT_EQ(ck.state.epoch, 1);
}

TEST_F(Cli, ZeroThresholdsReproduceBase) {
    ASSERT_EQ(run("train " + cfg() + " --lambda1 0 --lambda2 0 --out " + path("zero").string()).code, 0);
    ASSERT_EQ(run("train " + cfg() + " --dts false --out " + path("base").string()).code, 0);
    const Checkpoint a = load_checkpoint(path("zero") / "model.ckpt");
    const Checkpoint b = load_checkpoint(path("base") / "model.ckpt");
    EXPECT_TRUE(bit_equal(a.best, b.best));
    EXPECT_TRUE(bit_equal(a.state.params, b.state.params));
    EXPECT_EQ(a.state.val_hr, b.state.val_hr);
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
    ASSERT_EQ(run("train " + cfg() + " --out " + path("whole").string()).code, 0);
    const auto stop = run("train " + cfg() + " --stop-after 1 --out " + path("pieces").string());
    ASSERT_EQ(stop.code, 0) << stop.err;
    EXPECT_EQ(load_checkpoint(path("pieces") / "model.ckpt").state.epoch, 1);
    const auto resumed = run("train --resume --data " + path("data").string() + " --out " + path("pieces").string());
    ASSERT_EQ(resumed.code, 0) << resumed.err;
    EXPECT_EQ(slurp(path("whole") / "model.ckpt"), slurp(path("pieces") / "model.ckpt"));
    EXPECT_EQ(slurp(path("whole") / "loss_curve.csv"), slurp(path("pieces") / "loss_curve.csv"));
    EXPECT_NE(run("train --resume " + cfg() + " --out " + path("pieces").string()).code, 0);
}

TEST_F(Cli, EvalShapesAndRankOneIdentity) {
    ASSERT_EQ(run("train " + cfg() + " --epochs 1 --out " + path("ev_run").string()).code, 0);
    const std::string ck = (path("ev_run") / "model.ckpt").string();
    const std::string data = path("data").string();

    auto r = run("eval --checkpoint " + ck + " --data " + data + " --out " + path("ev5").string());
    ASSERT_EQ(r.code, 0) << r.err;
    auto rows = lines(slurp(path("ev5") / "metrics.csv"));
    ASSERT_EQ(rows.size(), 7u);
    EXPECT_EQ(rows[0], "w,seed,hr@20,ndcg@20,n");
    EXPECT_EQ(rows[6].substr(0, 7), "2,mean,");
    EXPECT_TRUE(fs::exists(path("ev5") / "config.resolved.txt"));

    r = run("eval --checkpoint " + ck + " --data " + data + " --k 1 --seeds 3 --out " + path("ev1").string());
    ASSERT_EQ(r.code, 0) << r.err;
    for (const auto& row : lines(slurp(path("ev1") / "metrics.csv"))) {
        if (row.front() == 'w') continue;
        std::vector<std::string> f;
        std::istringstream in(row);
        for (std::string c; std::getline(in, c, ',');) f.push_back(c);
        EXPECT_EQ(f[2], f[3]) << row;
    }

    r = run("eval --checkpoint " + ck + " --data " + data + " --w 0,2,4,6,8,10 --seeds 2 --out " + path("evw").string());
    ASSERT_EQ(r.code, 0) << r.err;
    rows = lines(slurp(path("evw") / "metrics.csv"));
    EXPECT_EQ(rows.size(), 1u + 6u * 3u);
    EXPECT_EQ(std::count_if(rows.begin(), rows.end(), [](const std::string& l) { return l.find(",mean,") != std::string::npos; }), 6);
}

TEST_F(Cli, AblateRowsAndErrors) {
    auto r = run("ablate " + cfg() + " --epochs 1 --seeds 1 --variants TDM --out " + path("ab1").string());
    ASSERT_EQ(r.code, 0) << r.err;
    auto rows = lines(slurp(path("ab1") / "ablation.csv"));
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[1].substr(0, 4), "TDM,");

    r = run("ablate " + cfg() + " --epochs 1 --seeds 1 --out " + path("ab9").string());
    ASSERT_EQ(r.code, 0) << r.err;
    rows = lines(slurp(path("ab9") / "ablation.csv"));
    ASSERT_EQ(rows.size(), 10u);
    EXPECT_EQ(rows[1].substr(0, 5), "Base,");

    r = run("ablate " + cfg() + " --variants TDM,w/Z --out " + path("abx").string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("w/Z"), std::string::npos);
    EXPECT_FALSE(fs::exists(path("abx") / "ablation.csv"));
}

TEST_F(Cli, SweepMissingRows) {
    const auto r = run("sweep-missing " + cfg() + " --epochs 1 --seeds 2 --variants TDM --out " + path("sw").string());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = lines(slurp(path("sw") / "sweep.csv"));
    ASSERT_EQ(rows.size(), 1u + 3u * 3u);
    EXPECT_EQ(rows[1].substr(0, 9), "TDM,0.10,");
    EXPECT_EQ(rows[7].substr(0, 9), "TDM,0.30,");
}

TEST_F(Cli, BadConfigIsRejected) {
    std::ofstream(path("bad.cfg")) << "dim = 16\nlearnin_rate = 0.1\n";
    auto r = run("train --config " + path("bad.cfg").string() + " --data " + path("data").string() + " --out " +
                 path("bad_run").string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("learnin_rate"), std::string::npos);
    EXPECT_FALSE(fs::exists(path("bad_run") / "model.ckpt"));

    std::ofstream(path("bad2.cfg")) << "dim 16\n";
    r = run("train --config " + path("bad2.cfg").string() + " --out " + path("bad_run").string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("line 1"), std::string::npos);

    r = run("train " + cfg() + " --S 7 --out " + path("bad_run").string());
    EXPECT_NE(r.code, 0);
    r = run("bogus-command");
    EXPECT_NE(r.code, 0);
}
