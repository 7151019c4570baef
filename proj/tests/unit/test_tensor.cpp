#include <gtest/gtest.h>

#include "ibpbnn/tensor.hpp"

using namespace ibpbnn;

TEST(Tensor, ConstructionChecksDataLength) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  const Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_DOUBLE_EQ(t.at(1, 2), 1.5);
}

TEST(Tensor, ScalarHasRankZero) {
  const Tensor s = Tensor::scalar(3.0);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_DOUBLE_EQ(s.item(), 3.0);
  EXPECT_THROW(Tensor::vector({1, 2}).item(), ShapeError);
}

TEST(Tensor, MatmulIdentity) {
  const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor col = Tensor::matrix(2, 1, {2, 3});
  EXPECT_EQ(matmul(eye, col), col);
}

TEST(Tensor, MatmulShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}, 0.0), Tensor({2, 3}, 0.0));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
  }
}

TEST(Tensor, BroadcastRowVectorOverMatrix) {
  const Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  const Tensor r = Tensor::vector({10, 20});
  const Tensor s = zip_broadcast(m, r, [](double a, double b) { return a + b; }, "add");
  EXPECT_EQ(s, Tensor::matrix(2, 2, {11, 22, 13, 24}));
  EXPECT_EQ(reduce_to(s, {2}), Tensor::vector({24, 46}));
}

TEST(Tensor, IncompatibleBroadcastThrows) {
  EXPECT_THROW(zip_broadcast(Tensor({2, 3}, 0.0), Tensor({2}, 0.0), [](double a, double) { return a; }, "add"),
               ShapeError);
}

TEST(Tensor, TransposeAndSum) {
  const Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor t = transpose(m);
  EXPECT_EQ(t.shape(), (Shape{3, 2}));
  EXPECT_DOUBLE_EQ(t.at(2, 1), 6.0);
  EXPECT_DOUBLE_EQ(sum_all(m), 21.0);
}

TEST(Tensor, AllFinite) {
  Tensor t = Tensor::vector({1, 2});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
}
