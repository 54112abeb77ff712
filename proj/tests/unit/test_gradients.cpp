#include <gtest/gtest.h>

#include "support/gradcheck.hpp"

using namespace mlfd;

TEST(GradientSuite, EveryPrimitiveMatchesFiniteDifferences) {
    const auto reports = testkit::run_gradient_suite(20, 2024);
    EXPECT_GE(reports.size(), 25u);
    for (const auto& r : reports) {
        EXPECT_EQ(r.cases, 20u) << r.name;
        EXPECT_LE(r.worst, 1e-4) << r.name;
    }
}

TEST(GradientSuite, DetectsAWrongGradient) {
    // A builder whose recorded backward disagrees with its forward must be flagged.
    testkit::GradCase c{{Tensor({1, 3}, {0.5, -1.0, 2.0})}, [](Tape& tape, const std::vector<Var>& v) {
                            const Var x = v[0];
                            return tape.record("broken_square", Tensor({1, 3}, {x.value()[0] * x.value()[0],
                                                                                x.value()[1] * x.value()[1],
                                                                                x.value()[2] * x.value()[2]}),
                                               {x.id()}, [x](Tape& t, std::size_t self) {
                                                   const Tensor g = t.grad_buffer(self);
                                                   Tensor& gx = t.grad_buffer(x.id());
                                                   for (std::size_t i = 0; i < 3; ++i) gx[i] += g[i] * x.value()[i];
                                               });
                        }};
    EXPECT_GT(testkit::gradcheck(c, 1), 0.4);
}
