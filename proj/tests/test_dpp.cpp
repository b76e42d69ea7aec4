#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "logreasoner/dpp.hpp"
#include "test_helpers.hpp"

using namespace logreasoner;
using testutil::Matrix;

namespace {

Kernel kernel_from(const Matrix& m) {
    Kernel k;
    k.n = m.size();
    k.entries.resize(k.n * k.n);
    for (std::size_t i = 0; i < k.n; ++i)
        for (std::size_t j = 0; j < k.n; ++j) k.at(i, j) = m[i][j];
    return k;
}

Matrix matrix_from(const Kernel& k) {
    Matrix m(k.n, std::vector<double>(k.n));
    for (std::size_t i = 0; i < k.n; ++i)
        for (std::size_t j = 0; j < k.n; ++j) m[i][j] = k.at(i, j);
    return m;
}

}  // namespace

TEST_CASE("build_kernel on identical and orthogonal unit vectors") {
    Kernel same = build_kernel({{1.0, 0.0}, {1.0, 0.0}}, 0.0);
    CHECK(same.at(0, 0) == Catch::Approx(1.0));
    CHECK(same.at(0, 1) == Catch::Approx(1.0));
    CHECK(same.at(1, 0) == Catch::Approx(1.0));
    CHECK(same.at(1, 1) == Catch::Approx(1.0));

    Kernel ortho = build_kernel({{2.0, 0.0}, {0.0, 0.5}}, 0.0);
    CHECK(ortho.at(0, 0) == Catch::Approx(1.0));
    CHECK(ortho.at(0, 1) == Catch::Approx(0.0).margin(1e-15));
    CHECK(ortho.at(1, 1) == Catch::Approx(1.0));
}

TEST_CASE("build_kernel errors") {
    CHECK_THROWS_AS(build_kernel({{0.0, 0.0}}, 1e-6), ZeroVectorError);
    CHECK_THROWS_AS(build_kernel({{1.0, 0.0}, {1.0}}, 1e-6), DimensionMismatchError);
    CHECK_THROWS_AS(build_kernel({}, 1e-6), DimensionMismatchError);
}

TEST_CASE("build_kernel output is PSD and symmetric (independent eigensolver)") {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<std::vector<double>> vecs(5, std::vector<double>(7));
    for (auto& v : vecs)
        for (double& x : v) x = dist(rng);
    Kernel k = build_kernel(vecs, 1e-6);

    for (std::size_t i = 0; i < k.n; ++i) {
        CHECK(k.at(i, i) >= 1e-6 - 1e-12);
        CHECK(k.at(i, i) <= 1.0 + 1e-6 + 1e-9);
        for (std::size_t j = 0; j < k.n; ++j)
            CHECK(std::abs(k.at(i, j) - k.at(j, i)) < 1e-9);
    }
    for (double eig : testutil::jacobi_eigenvalues(matrix_from(k)))
        CHECK(eig >= -1e-9);
}

TEST_CASE("dpp_select trivial cases") {
    // identity kernel: all gains equal, lowest-index tie-break
    Kernel eye = kernel_from({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    Selection sel = dpp_select(eye, 2);
    REQUIRE(sel.indices == std::vector<std::size_t>{0, 1});
    CHECK(sel.gains[0] == Catch::Approx(0.0).margin(1e-12));
    CHECK(sel.gains[1] == Catch::Approx(0.0).margin(1e-12));

    // duplicate items: first wins
    Kernel dup = build_kernel({{1.0, 0.0}, {1.0, 0.0}}, 1e-6);
    Selection one = dpp_select(dup, 1);
    REQUIRE(one.indices == std::vector<std::size_t>{0});
}

TEST_CASE("dpp_select error paths") {
    Kernel eye = kernel_from({{1, 0}, {0, 1}});
    CHECK_THROWS_AS(dpp_select(eye, 3), BudgetExceededError);
    CHECK_THROWS_AS(dpp_select(eye, 0), std::invalid_argument);

    // three identical items without jitter: second pivot collapses
    Kernel dup = build_kernel({{1.0, 0.0}, {1.0, 0.0}, {1.0, 0.0}}, 0.0);
    CHECK_THROWS_AS(dpp_select(dup, 2), NumericalBreakdownError);
}

TEST_CASE("fast greedy matches the naive recompute-determinant oracle") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 40; ++trial) {
        std::size_t n = 4 + trial % 9;  // up to 12
        std::size_t k = 1 + trial % std::min<std::size_t>(n, 6);
        Matrix m = testutil::random_psd(rng, n, 1e-6);
        Selection fast = dpp_select(kernel_from(m), k);
        testutil::NaiveSelection naive = testutil::naive_greedy(m, k);
        REQUIRE(fast.indices == naive.indices);
        for (std::size_t i = 0; i < k; ++i)
            CHECK(fast.gains[i] == Catch::Approx(naive.gains[i]).margin(1e-8));
    }
}

TEST_CASE("gains are non-increasing in selection order") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t n = 5 + trial % 8;
        Matrix m = testutil::random_psd(rng, n, 1e-6);
        Selection sel = dpp_select(kernel_from(m), std::min<std::size_t>(n, 5));
        for (std::size_t i = 1; i < sel.gains.size(); ++i)
            CHECK(sel.gains[i] <= sel.gains[i - 1] + 1e-12);
    }
}

TEST_CASE("selection is equivariant under permutation of the kernel") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 10; ++trial) {
        std::size_t n = 6 + trial % 5;
        std::size_t k = 3;
        Matrix m = testutil::random_psd(rng, n, 1e-6);

        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix pm(n, std::vector<double>(n));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) pm[i][j] = m[perm[i]][perm[j]];

        Selection base = dpp_select(kernel_from(m), k);
        Selection permuted = dpp_select(kernel_from(pm), k);

        // gains must be distinct for the equivariance statement to be exact
        bool distinct = true;
        for (std::size_t i = 1; i < base.gains.size(); ++i)
            distinct = distinct && std::abs(base.gains[i] - base.gains[i - 1]) > 1e-9;
        if (!distinct) continue;

        std::vector<std::size_t> inverse(n);
        for (std::size_t i = 0; i < n; ++i) inverse[perm[i]] = i;
        std::vector<std::size_t> mapped;
        for (std::size_t idx : base.indices) mapped.push_back(inverse[idx]);
        REQUIRE(permuted.indices == mapped);
    }
}

TEST_CASE("selection is deterministic") {
    std::mt19937_64 rng(99);
    Matrix m = testutil::random_psd(rng, 10, 1e-6);
    Selection a = dpp_select(kernel_from(m), 4);
    Selection b = dpp_select(kernel_from(m), 4);
    CHECK(a.indices == b.indices);
    CHECK(a.gains == b.gains);
}
