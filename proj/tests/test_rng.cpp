#include "catch_amalgamated.hpp"
#include "tupleworks/rng.hpp"

#include <cmath>
#include <array>
#include <map>
#include <set>

using namespace tupleworks;

// Known-answer vectors published with the Random123 distribution.
TEST_CASE("philox4x32-10 known answers") {
    using A4 = std::array<std::uint32_t, 4>;
    using A2 = std::array<std::uint32_t, 2>;
    CHECK(philox4x32_10(A4{0, 0, 0, 0}, A2{0, 0}) == A4{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
    CHECK(philox4x32_10(A4{0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, A2{0xffffffff, 0xffffffff}) ==
          A4{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
    CHECK(philox4x32_10(A4{0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, A2{0xa4093822, 0x299f31d0}) ==
          A4{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("streams are reproducible and distinct") {
    RandomStream a(42, 3), b(42, 3), c(42, 4), d(43, 3);
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        CHECK(x == b.next_u64());
        CHECK(x != c.next_u64());
        CHECK(x != d.next_u64());
    }
}

TEST_CASE("derived seeds separate tags and indices") {
    std::set<std::uint64_t> seen;
    for (const char* tag : {"po", "MT", "MT2", "C"})
        for (std::uint64_t r = 0; r < 50; ++r) seen.insert(derive_seed(1, tag, r));
    CHECK(seen.size() == 200);
    CHECK(derive_seed(1, "po", 0) == derive_seed(1, "po", 0));
}

TEST_CASE("uniform and normal moments") {
    RandomStream rng(11, 0);
    const int N = 200000;
    double su = 0, su2 = 0, sn = 0, sn2 = 0;
    for (int i = 0; i < N; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        su += u;
        su2 += u * u;
        const double z = rng.normal();
        sn += z;
        sn2 += z * z;
    }
    CHECK(std::fabs(su / N - 0.5) < 4 * std::sqrt(1.0 / 12 / N));
    CHECK(std::fabs(su2 / N - 1.0 / 3) < 0.005);
    CHECK(std::fabs(sn / N) < 4 / std::sqrt(N));
    CHECK(std::fabs(sn2 / N - 1.0) < 4 * std::sqrt(2.0 / N));
}

TEST_CASE("below is unbiased over a small range") {
    RandomStream rng(5, 1);
    std::array<int, 6> counts{};
    const int N = 60000;
    for (int i = 0; i < N; ++i) ++counts[rng.below(6)];
    for (int c : counts) CHECK(std::fabs(c / double(N) - 1.0 / 6) < 0.01);
}

TEST_CASE("shuffle is a uniform permutation") {
    RandomStream rng(9, 0);
    std::map<std::array<int, 3>, int> freq;
    const int N = 6000;
    for (int i = 0; i < N; ++i) {
        std::array<int, 3> v{1, 2, 3};
        rng.shuffle(v.begin(), v.end());
        ++freq[v];
    }
    REQUIRE(freq.size() == 6);
    for (auto& [k, c] : freq) CHECK(std::fabs(c / double(N) - 1.0 / 6) < 0.02);
}
