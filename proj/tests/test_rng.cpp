#include <catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "support.hpp"

using namespace adaptkit;

TEST_CASE("rng streams are reproducible per seed") {
    Rng a(7), b(7), c(8);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next();
        REQUIRE(x == b.next());
        differs |= x != c.next();
    }
    CHECK(differs);
}

TEST_CASE("uniform stays in [0,1) and has mean near 1/2") {
    Rng r(1);
    double sum = 0;
    for (int i = 0; i < 20000; ++i) {
        const double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
    }
    CHECK(std::abs(sum / 20000 - 0.5) < 0.01);
}

TEST_CASE("normal draws have unit variance") {
    Rng r(2);
    double s = 0, s2 = 0;
    const int n = 50000;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        s += x;
        s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.02);
    CHECK(std::abs(s2 / n - 1.0) < 0.03);
}

TEST_CASE("below covers its range uniformly") {
    Rng r(3);
    std::vector<int> hist(5, 0);
    for (int i = 0; i < 10000; ++i) {
        const auto k = r.below(5);
        REQUIRE(k < 5);
        ++hist[k];
    }
    for (int h : hist) CHECK(std::abs(h - 2000) < 200);
}

TEST_CASE("shuffle yields a permutation and matches a hand-rolled Fisher-Yates") {
    std::vector<int> v(20);
    std::iota(v.begin(), v.end(), 0);
    std::vector<int> w = v;
    Rng r1(11), r2(11);
    r1.shuffle(v);
    for (std::size_t i = w.size(); i > 1; --i) std::swap(w[i - 1], w[r2.below(i)]);
    CHECK(v == w);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 20; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("fnv1a matches published test vectors") {
    CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("mix_seed separates nearby seeds") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(mix_seed(42, i));
    CHECK(seen.size() == 1000);
    CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}
