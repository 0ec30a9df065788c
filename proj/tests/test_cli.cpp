#include <doctest.h>

#include <flowmc/checkpoint.hpp>
#include <flowmc/image_io.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#ifdef _WIN32
#error "the CLI tests drive the binary through a POSIX shell"
#endif
#include <sys/wait.h>

using namespace flowmc;
namespace fs = std::filesystem;

namespace {

// Binary path injected by ctest; running the suite standalone without it
// should fail loudly rather than vacuously pass.
std::string cli_binary() {
    const char* p = std::getenv("FLOWMC_CLI");
    REQUIRE_MESSAGE(p != nullptr, "FLOWMC_CLI must point at the flowmc binary");
    return p;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("flowmc_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    REQUIRE(out.good());
    out << text;
    REQUIRE(out.good());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "missing file: " << path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Runs "<env> flowmc <args>" with stdout/stderr captured into log files under
// `dir` and returns the process exit status.
int run_cli(const std::string& args, const fs::path& dir, const std::string& env = "") {
    const std::string cmd = env + (env.empty() ? "" : " ") + "\"" + cli_binary() + "\" " + args +
                            " >\"" + (dir / "stdout.log").string() + "\" 2>\"" +
                            (dir / "stderr.log").string() + "\"";
    const int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    REQUIRE(WIFEXITED(rc));
    return WEXITSTATUS(rc);
}

int count_lines(const std::string& text) {
    int n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

// Small 2D setup that trains in well under a second.
std::string tiny_train_config(const std::string& extra_train = "") {
    return "[target]\n"
           "kind = builtin\n"
           "name = wedge\n"
           "res = 16\n"
           "[flow]\n"
           "dim = 2\n"
           "layers = 2\n"
           "transform = pwl\n"
           "bins = 8\n"
           "blob_k = 4\n"
           "net_hidden = 8\n"
           "[train]\n"
           "budget = 255\n"
           "batch = 32\n"
           "chunk = 64\n"
           "buffer = 1024\n"
           "lr = 0.01\n"
           "density_res = 16\n"
           "density_per_iteration = false\n" +
           extra_train;
}

}  // namespace

TEST_SUITE("cli") {
    TEST_CASE("train-image writes its artifacts and is byte deterministic") {
        const fs::path dir = fresh_dir("train_det");
        write_text(dir / "run.cfg", tiny_train_config());

        const std::string base =
            "train-image --quiet --config \"" + (dir / "run.cfg").string() + "\" --out \"";
        REQUIRE(run_cli(base + (dir / "a").string() + "\" --seed 5", dir) == 0);
        REQUIRE(run_cli(base + (dir / "b").string() + "\" --seed 5", dir) == 0);

        for (const char* name : {"metrics.csv", "summary.csv", "density.pfm", "flow.ckpt"}) {
            const std::string a = read_text(dir / "a" / name);
            CHECK_MESSAGE(a == read_text(dir / "b" / name), "artifact differs: " << name);
            CHECK(!a.empty());
        }

        // budget 255 doubles as 1+2+...+128: eight iterations.
        const std::string metrics = read_text(dir / "a" / "metrics.csv");
        CHECK(count_lines(metrics) == 9);
        CHECK(metrics.rfind("iteration,samples,loss,estimate,variance,weight_p9999,wallclock_ms",
                            0) == 0);

        const std::string summary = read_text(dir / "a" / "summary.csv");
        REQUIRE(count_lines(summary) == 2);
        const std::string header = summary.substr(0, summary.find('\n'));
        CHECK(header ==
              "cross_entropy,mape,estimate,variance,combined_estimate,train_steps,rejected_steps,"
              "clamped");
        const std::vector<std::string> row =
            split_csv_line(summary.substr(summary.find('\n') + 1));
        REQUIRE(row.size() == 8);
        CHECK(std::stod(row[2]) > 0.0);          // estimate of a positive integrand
        CHECK(std::stoll(row[5]) == 8);          // one train step per iteration
        CHECK(std::stoll(row[6]) == 0);          // nothing rejected on this target

        // A different seed must change the learned state.
        REQUIRE(run_cli(base + (dir / "c").string() + "\" --seed 9", dir) == 0);
        CHECK(read_text(dir / "a" / "summary.csv") != read_text(dir / "c" / "summary.csv"));
        CHECK(read_text(dir / "a" / "flow.ckpt") != read_text(dir / "c" / "flow.ckpt"));

        // The checkpoint reloads into a usable flow.
        const NormalizingFlow flow = load_flow((dir / "a" / "flow.ckpt").string());
        CHECK(flow.cfg.dim == 2);
        CHECK(flow.layers.size() == 2);
        const Image grid = read_pfm((dir / "a" / "density.pfm").string());
        CHECK(grid.width == 16);
        CHECK(grid.height == 16);
    }

    TEST_CASE("train-image emits per-iteration density grids when asked") {
        const fs::path dir = fresh_dir("train_iters");
        write_text(dir / "run.cfg",
                   "[target]\n"
                   "kind = builtin\n"
                   "name = constant\n"
                   "res = 8\n"
                   "[flow]\n"
                   "dim = 2\n"
                   "layers = 2\n"
                   "transform = pwl\n"
                   "bins = 4\n"
                   "blob_k = 4\n"
                   "net_hidden = 8\n"
                   "[train]\n"
                   "budget = 63\n"
                   "batch = 16\n"
                   "chunk = 64\n"
                   "buffer = 256\n"
                   "density_res = 8\n"
                   "density_per_iteration = true\n");
        REQUIRE(run_cli("train-image --quiet --config \"" + (dir / "run.cfg").string() +
                            "\" --out \"" + (dir / "out").string() + "\"",
                        dir) == 0);
        for (int i = 1; i <= 6; ++i) {
            const fs::path p = dir / "out" / (std::string("density_iter0") + char('0' + i) + ".pfm");
            REQUIRE_MESSAGE(fs::exists(p), "missing " << p.string());
        }
        CHECK_FALSE(fs::exists(dir / "out" / "density_iter07.pfm"));
        const Image snap = read_pfm((dir / "out" / "density_iter06.pfm").string());
        CHECK(snap.width == 8);
        CHECK(snap.height == 8);
    }

    TEST_CASE("gen-target writes a peak-normalized 16-bit image the trainer accepts") {
        const fs::path dir = fresh_dir("gen");
        const fs::path pgm = dir / "wedge.pgm";
        REQUIRE(run_cli("gen-target --name wedge --res 16 --out \"" + pgm.string() + "\"", dir) ==
                0);

        const Image img = read_pgm(pgm.string());
        REQUIRE(img.width == 16);
        REQUIRE(img.height == 16);
        double peak = 0.0;
        for (double v : img.pix) {
            CHECK(v >= 0.0);
            peak = std::max(peak, v);
        }
        CHECK(peak == 1.0);  // peak maps to the full 16-bit code

        // The generated file round-trips through the pgm target kind.
        write_text(dir / "run.cfg",
                   "[target]\n"
                   "kind = pgm\n"
                   "path = " + pgm.string() + "\n"
                   "[flow]\n"
                   "dim = 2\n"
                   "layers = 2\n"
                   "transform = pwq\n"
                   "bins = 4\n"
                   "blob_k = 4\n"
                   "net_hidden = 8\n"
                   "[train]\n"
                   "budget = 127\n"
                   "batch = 32\n"
                   "chunk = 64\n"
                   "buffer = 512\n"
                   "density_res = 8\n"
                   "density_per_iteration = false\n");
        CHECK(run_cli("train-image --quiet --config \"" + (dir / "run.cfg").string() +
                          "\" --out \"" + (dir / "out").string() + "\"",
                      dir) == 0);
        CHECK(fs::exists(dir / "out" / "summary.csv"));
    }

    TEST_CASE("diagnose-width-gradients tabulates both formulations") {
        const fs::path dir = fresh_dir("diag");
        write_text(dir / "diag.cfg", "[width_diagnostic]\nq1 = 1\nq2 = 3\ntarget = uniform\n");
        REQUIRE(run_cli("diagnose-width-gradients --quiet --config \"" +
                            (dir / "diag.cfg").string() + "\" --out \"" + (dir / "out").string() +
                            "\"",
                        dir) == 0);

        std::ifstream in(dir / "out" / "width_gradients.csv");
        REQUIRE(in.good());
        std::string line;
        REQUIRE(std::getline(in, line));
        CHECK(line == "theta,density_normalized,mass_normalized");
        int rows = 0;
        while (std::getline(in, line)) {
            const std::vector<std::string> cells = split_csv_line(line);
            REQUIRE(cells.size() == 3);
            ++rows;
            // Uniform target: the mass-normalized gradient vanishes for every
            // split and the density-normalized one keeps the sign of q1 - q2.
            CHECK(std::abs(std::stod(cells[2])) < 1e-9);
            CHECK(std::stod(cells[1]) < 0.0);
        }
        CHECK(rows == 99);
    }

    TEST_CASE("guiding-bench trains a selection network from a scenario file") {
        const fs::path dir = fresh_dir("guide");
        write_text(dir / "scene.cfg",
                   "[scenario]\n"
                   "name = tiny\n"
                   "budget = 255\n"
                   "eval_samples = 64\n"
                   "seed = 3\n"
                   "[context]\n"
                   "lobe_u = 0.3\n"
                   "lobe_v = 0.7\n"
                   "sigma = 0.1\n");
        write_text(dir / "run.cfg",
                   "[flow]\n"
                   "layers = 2\n"
                   "transform = pwq\n"
                   "bins = 4\n"
                   "blob_k = 4\n"
                   "net_hidden = 8\n"
                   "[guiding]\n"
                   "scenario = " + (dir / "scene.cfg").string() + "\n"
                   "batch = 32\n"
                   "chunk = 64\n"
                   "buffer = 1024\n");
        REQUIRE(run_cli("guiding-bench --quiet --config \"" + (dir / "run.cfg").string() +
                            "\" --out \"" + (dir / "out").string() + "\"",
                        dir) == 0);

        const std::string csv = read_text(dir / "out" / "guiding.csv");
        CHECK(csv.rfind("iteration,samples,loss,c_mean,var_flow,var_analytic,var_mis_fixed,"
                        "var_mis_learned,wallclock_ms",
                        0) == 0);
        CHECK(count_lines(csv) == 9);  // header + eight doubling iterations
        CHECK(fs::exists(dir / "out" / "flow.ckpt"));
        CHECK(fs::exists(dir / "out" / "selection.ckpt"));

        // Selection probabilities live strictly inside (0, 1).
        std::istringstream ss(csv);
        std::string line;
        std::getline(ss, line);
        while (std::getline(ss, line)) {
            const double c = std::stod(split_csv_line(line)[3]);
            CHECK(c > 0.0);
            CHECK(c < 1.0);
        }
    }

    TEST_CASE("pss-bench compares the trained flow against uniform sampling") {
        const fs::path dir = fresh_dir("pss");
        write_text(dir / "run.cfg",
                   "[flow]\n"
                   "dim = 4\n"
                   "layers = 2\n"
                   "transform = pwq\n"
                   "bins = 4\n"
                   "blob_k = 4\n"
                   "net_hidden = 8\n"
                   "partition = even-odd\n"
                   "[train]\n"
                   "budget = 255\n"
                   "batch = 32\n"
                   "chunk = 64\n"
                   "buffer = 1024\n"
                   "[pss]\n"
                   "eval_samples = 4096\n");
        REQUIRE(run_cli("pss-bench --quiet --config \"" + (dir / "run.cfg").string() +
                            "\" --seed 11 --out \"" + (dir / "out").string() + "\"",
                        dir) == 0);

        std::ifstream in(dir / "out" / "pss.csv");
        REQUIRE(in.good());
        std::string line;
        REQUIRE(std::getline(in, line));
        CHECK(line == "strategy,mean,variance");
        REQUIRE(std::getline(in, line));
        std::vector<std::string> uni = split_csv_line(line);
        REQUIRE(uni.size() == 3);
        CHECK(uni[0] == "uniform");
        // The synthetic target integrates to 2.25; a 4096-sample uniform mean
        // lands well inside this window.
        CHECK(std::stod(uni[1]) > 1.5);
        CHECK(std::stod(uni[1]) < 3.0);
        CHECK(std::stod(uni[2]) > 0.0);
        REQUIRE(std::getline(in, line));
        std::vector<std::string> fl = split_csv_line(line);
        REQUIRE(fl.size() == 3);
        CHECK(fl[0] == "flow");
        CHECK(std::stod(fl[1]) > 0.0);
        CHECK(fs::exists(dir / "out" / "metrics.csv"));
        CHECK(fs::exists(dir / "out" / "flow.ckpt"));
    }

    TEST_CASE("failure paths map to distinct exit codes") {
        const fs::path dir = fresh_dir("exit");

        SUBCASE("missing config file") {
            CHECK(run_cli("train-image --config \"" + (dir / "nope.cfg").string() + "\"", dir) ==
                  1);
        }
        SUBCASE("config without a target section") {
            write_text(dir / "bad.cfg", "[flow]\ndim = 2\n");
            CHECK(run_cli("train-image --config \"" + (dir / "bad.cfg").string() + "\"", dir) ==
                  1);
        }
        SUBCASE("misspelled key is rejected, not ignored") {
            write_text(dir / "typo.cfg", tiny_train_config("bodget = 12\n"));
            CHECK(run_cli("train-image --quiet --config \"" + (dir / "typo.cfg").string() +
                              "\" --out \"" + (dir / "out").string() + "\"",
                          dir) == 1);
            const std::string err = read_text(dir / "stderr.log");
            CHECK(err.find("bodget") != std::string::npos);
        }
        SUBCASE("garbage thread cap") {
            write_text(dir / "run.cfg", tiny_train_config());
            CHECK(run_cli("gen-target --out \"" + (dir / "t.pgm").string() + "\"", dir,
                          "FLOWMC_THREADS=lots") == 1);
            CHECK(run_cli("gen-target --out \"" + (dir / "t.pgm").string() + "\"", dir,
                          "FLOWMC_THREADS=1") == 0);
        }
        SUBCASE("rejected-step threshold trips the dedicated code") {
            // A negative threshold makes any run (even one with zero rejected
            // steps) exceed it, pinning the exit path deterministically.
            write_text(dir / "run.cfg", tiny_train_config("fail_threshold = -0.5\n"));
            CHECK(run_cli("train-image --quiet --config \"" + (dir / "run.cfg").string() +
                              "\" --out \"" + (dir / "out").string() + "\"",
                          dir) == 2);
            const std::string err = read_text(dir / "stderr.log");
            CHECK(err.find("rejected training steps") != std::string::npos);
        }
        SUBCASE("usage errors from the argument parser") {
            CHECK(run_cli("", dir) != 0);                        // subcommand required
            CHECK(run_cli("train-image", dir) != 0);             // --config required
            CHECK(run_cli("make-coffee --config x.cfg", dir) != 0);
        }
    }

    TEST_CASE("run section supplies seed and output directory defaults") {
        const fs::path dir = fresh_dir("runsec");
        const std::string out_a = (dir / "from_cfg").string();
        write_text(dir / "run.cfg", "[run]\nseed = 5\nout = " + out_a + "\n" + tiny_train_config());
        REQUIRE(run_cli("train-image --quiet --config \"" + (dir / "run.cfg").string() + "\"",
                        dir) == 0);
        REQUIRE(fs::exists(fs::path(out_a) / "summary.csv"));

        // Explicit flags override the section; seed 5 must reproduce the
        // config-driven run byte for byte.
        write_text(dir / "plain.cfg", tiny_train_config());
        REQUIRE(run_cli("train-image --quiet --config \"" + (dir / "plain.cfg").string() +
                            "\" --seed 5 --out \"" + (dir / "from_flags").string() + "\"",
                        dir) == 0);
        CHECK(read_text(fs::path(out_a) / "summary.csv") ==
              read_text(dir / "from_flags" / "summary.csv"));
        CHECK(read_text(fs::path(out_a) / "flow.ckpt") ==
              read_text(dir / "from_flags" / "flow.ckpt"));
    }
}
