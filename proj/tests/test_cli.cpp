#include <cstdlib>
#include <sys/wait.h>

#include "support.hpp"

using namespace qstore;
using namespace qstore::test;

namespace {

struct Run {
    int code;
    std::string out;
};

Run run(const TempDir& dir, const std::string& args, const std::string& env = "")
{
    auto out = dir / "stdout.txt";
    std::string cmd = env + " " + std::string(QSTORE_CLI) + " " + args + " > " + out.string() + " 2> " +
                      (dir / "stderr.txt").string();
    int status = std::system(cmd.c_str());
    auto bytes = read_file(out);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, std::string(bytes.begin(), bytes.end())};
}

std::string p(const fs::path& path) { return "'" + path.string() + "'"; }

}  // namespace

TEST(Cli, PairWorkflow)
{
    TempDir dir;
    auto hi = dir / "hi", lo = dir / "lo", ar = dir / "ar";
    ASSERT_EQ(run(dir, "quantize --synthetic 512x2048x1 --seed 7 --high " + p(hi) + " --out " + p(lo) + " --bits 8")
                  .code,
              0);
    EXPECT_TRUE(fs::exists(lo / "quant_spec.json"));

    auto packed = run(dir, "pack --high " + p(hi) + " --low " + p(lo) + " --out " + p(ar) + " --json");
    ASSERT_EQ(packed.code, 0);
    std::set<std::string> files;
    for (auto& e : fs::directory_iterator(ar)) files.insert(e.path().filename().string());
    EXPECT_EQ(files, (std::set<std::string>{"manifest.json", "model.qslo", "model.qshi"}));
    auto pj = nlohmann::json::parse(packed.out);
    EXPECT_LT(pj["bits_per_weight"].get<double>(), 24.0);

    for (auto [level, src] : {std::pair{"bf16", hi}, std::pair{"int8", lo}}) {
        auto out = dir / (std::string("u_") + level);
        ASSERT_EQ(run(dir, "unpack --archive " + p(ar) + " --level " + level + " --out " + p(out)).code, 0);
        EXPECT_EQ(load_tensor_bundle(out), load_tensor_bundle(src)) << level;
    }
    EXPECT_EQ(load_quant_spec(dir / "u_int8" / "quant_spec.json"), load_quant_spec(lo / "quant_spec.json"));

    auto ins = run(dir, "inspect --archive " + p(ar) + " --json");
    ASSERT_EQ(ins.code, 0);
    auto ij = nlohmann::json::parse(ins.out);
    std::uint64_t on_disk = 0;
    for (auto& e : fs::directory_iterator(ar)) on_disk += e.file_size();
    EXPECT_EQ(ij["total_stored_bytes"].get<std::uint64_t>(), on_disk);
    EXPECT_EQ(ij["filesystem_bytes"].get<std::uint64_t>(), on_disk);
    EXPECT_EQ(run(dir, "inspect --archive " + p(ar) + " --json").out, ins.out);

    auto ent = run(dir, "entropy --archive " + p(ar) + " --json");
    ASSERT_EQ(ent.code, 0);
    auto ej = nlohmann::json::parse(ent.out);
    EXPECT_LT(ej["strategies"]["combined"]["entropy"].get<double>(), ej["strategies"]["none"]["entropy"].get<double>());
    auto ent2 = run(dir, "entropy --high " + p(hi) + " --low " + p(lo) + " --json");
    ASSERT_EQ(ent2.code, 0);
    EXPECT_EQ(nlohmann::json::parse(ent2.out), ej);

    auto bench = run(dir, "bench --archive " + p(ar) + " --mode both --json --baseline " + p(hi));
    ASSERT_EQ(bench.code, 0);
    auto bj = nlohmann::json::parse(bench.out);
    EXPECT_EQ(bj["runs"].size(), 2u);
    EXPECT_TRUE(bj["baseline"].contains("speedup"));

    EXPECT_EQ(run(dir, "inspect --archive " + p(ar)).code, 0);
}

TEST(Cli, ChainPack)
{
    TempDir dir;
    auto hi = dir / "hi.safetensors";
    ASSERT_EQ(run(dir, "quantize --synthetic 8x1024x2 --dtype FP16 --high " + p(hi) + " --out " + p(dir / "q4") +
                           " --bits 4 --block-axis flat_groups --block-size 512")
                  .code,
              0);
    ASSERT_EQ(run(dir, "quantize --high " + p(hi) + " --out " + p(dir / "q8") +
                           " --bits 8 --block-axis flat_groups --block-size 512")
                  .code,
              0);
    ASSERT_EQ(run(dir, "pack --high " + p(hi) + " --low " + p(dir / "q4") + " --low " + p(dir / "q8") + " --out " +
                           p(dir / "ar"))
                  .code,
              0);
    for (auto f : {"model.qslo", "int8.qshi", "fp16.qshi"}) EXPECT_TRUE(fs::exists(dir / "ar" / f)) << f;
    ASSERT_EQ(run(dir, "unpack --archive " + p(dir / "ar") + " --out " + p(dir / "u.safetensors")).code, 0);
    EXPECT_EQ(read_file(dir / "u.safetensors"), read_file(hi));
    ASSERT_EQ(run(dir, "unpack --archive " + p(dir / "ar") + " --level int8 --out " + p(dir / "u8")).code, 0);
    EXPECT_EQ(load_tensor_bundle(dir / "u8"), load_tensor_bundle(dir / "q8"));
}

TEST(Cli, MismatchedShapesExitOne)
{
    TempDir dir;
    ASSERT_EQ(run(dir, "quantize --synthetic 8x32x1 --high " + p(dir / "a") + " --out " + p(dir / "qa")).code, 0);
    ASSERT_EQ(run(dir, "quantize --synthetic 8x16x1 --high " + p(dir / "b")).code, 0);
    auto r = run(dir, "pack --high " + p(dir / "b") + " --low " + p(dir / "qa") + " --out " + p(dir / "ar"));
    EXPECT_EQ(r.code, 1);
    EXPECT_FALSE(fs::exists(dir / "ar"));
}

TEST(Cli, ErrorsMapToExitCodes)
{
    TempDir dir;
    EXPECT_EQ(run(dir, "inspect --archive " + p(dir / "missing")).code, 2);
    EXPECT_EQ(run(dir, "frobnicate").code, 1);
    EXPECT_EQ(run(dir, "quantize --high " + p(dir / "x") + " --synthetic 4x4").code, 1);
    EXPECT_EQ(run(dir, "quantize --synthetic 4x4x1 --high " + p(dir / "x"), "QSTORE_THREADS=zero").code, 1);
    EXPECT_EQ(run(dir, "quantize --synthetic 4x4x1 --high " + p(dir / "x"), "QSTORE_THREADS=2").code, 0);
    EXPECT_EQ(run(dir, "--help").code, 0);

    ASSERT_EQ(run(dir, "quantize --synthetic 4x64x1 --high " + p(dir / "h") + " --out " + p(dir / "l")).code, 0);
    ASSERT_EQ(run(dir, "pack --high " + p(dir / "h") + " --low " + p(dir / "l") + " --out " + p(dir / "ar")).code, 0);
    auto qshi = read_file(dir / "ar" / "model.qshi");
    qshi.back() ^= 0x10;
    write_file(dir / "ar" / "model.qshi", qshi);
    EXPECT_EQ(run(dir, "unpack --archive " + p(dir / "ar") + " --out " + p(dir / "u")).code, 2);
    EXPECT_EQ(run(dir, "unpack --archive " + p(dir / "ar") + " --level nope --out " + p(dir / "u")).code, 1);
}
