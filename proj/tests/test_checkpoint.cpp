#include <doctest.h>

#include <cstring>
#include <fstream>
#include <random>

#include "nfpf/checkpoint.hpp"
#include "nfpf/errors.hpp"
#include "nfpf/mlp.hpp"
#include "test_util.hpp"

using namespace nfpf;

TEST_CASE("checkpoint round trip is bit-exact") {
    auto dir = testutil::scratch_dir("ckpt_roundtrip");
    std::mt19937_64 rng(11);
    Mlp a({5, 7, 3}, rng);
    for (double& b : a.bias(0).mutable_data()) b = std::uniform_real_distribution<double>(-1, 1)(rng);
    a.weight(1).mutable_data()[0] = 1.0 / 3.0;
    a.weight(1).mutable_data()[1] = -0.0;
    a.weight(1).mutable_data()[2] = 5e-324;
    ParamList pa;
    a.append_parameters("net", pa);
    save_checkpoint(dir / "a.ckpt", pa);

    std::mt19937_64 other(99);
    Mlp b({5, 7, 3}, other);
    ParamList pb;
    b.append_parameters("net", pb);
    load_checkpoint(dir / "a.ckpt", pb);
    for (std::size_t i = 0; i < pa.size(); ++i) {
        auto x = pa[i].tensor->data();
        auto y = pb[i].tensor->data();
        REQUIRE(x.size() == y.size());
        CHECK(std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0);
    }

    save_checkpoint(dir / "b.ckpt", pb);
    CHECK(testutil::slurp(dir / "a.ckpt") == testutil::slurp(dir / "b.ckpt"));
}

TEST_CASE("checkpoint manifest lists names and shapes") {
    auto dir = testutil::scratch_dir("ckpt_manifest");
    std::mt19937_64 rng(1);
    Mlp a({2, 3}, rng);
    ParamList pa;
    a.append_parameters("m", pa);
    save_checkpoint(dir / "m.ckpt", pa);
    auto ckpt = read_checkpoint(dir / "m.ckpt");
    REQUIRE(ckpt.manifest.size() == 2);
    CHECK(ckpt.manifest[0].name == "m.w0");
    CHECK(ckpt.manifest[0].shape == ad::Shape{3, 2});
    CHECK(ckpt.manifest[1].name == "m.b0");
    CHECK(ckpt.manifest[1].shape == ad::Shape{3});
    CHECK(ckpt.values.size() == 9);
    auto text = testutil::slurp(dir / "m.ckpt");
    CHECK(text.rfind("nfpf-ckpt v1\n", 0) == 0);
}

TEST_CASE("checkpoint mismatches raise data errors") {
    auto dir = testutil::scratch_dir("ckpt_mismatch");
    std::mt19937_64 rng(1);
    Mlp a({2, 3}, rng);
    ParamList pa;
    a.append_parameters("m", pa);
    save_checkpoint(dir / "m.ckpt", pa);

    Mlp wider({2, 4}, rng);
    ParamList pw;
    wider.append_parameters("m", pw);
    CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", pw), DataError);

    ParamList renamed;
    a.append_parameters("other", renamed);
    CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", renamed), DataError);

    auto text = testutil::slurp(dir / "m.ckpt");
    std::ofstream(dir / "short.ckpt", std::ios::binary) << text.substr(0, text.size() - 8);
    CHECK_THROWS_AS(read_checkpoint(dir / "short.ckpt"), DataError);
    CHECK_THROWS_AS(read_checkpoint(dir / "missing.ckpt"), Error);
}
