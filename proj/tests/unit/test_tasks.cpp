#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "ibpbnn/tasks.hpp"

using namespace ibpbnn;

namespace {

// Nearest-mean classifier fitted on the training split.
double linear_accuracy(const Task& t) {
  const std::size_t d = t.train.dim();
  std::vector<std::vector<double>> mean(2, std::vector<double>(d, 0.0));
  std::vector<double> count(2, 0.0);
  for (std::size_t i = 0; i < t.train.size(); ++i) {
    count[t.train.y[i]] += 1;
    for (std::size_t j = 0; j < d; ++j) mean[t.train.y[i]][j] += t.train.x[i * d + j];
  }
  for (int c = 0; c < 2; ++c)
    for (auto& v : mean[c]) v /= count[c];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < t.test.size(); ++i) {
    double d0 = 0, d1 = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = t.test.x[i * d + j];
      d0 += (x - mean[0][j]) * (x - mean[0][j]);
      d1 += (x - mean[1][j]) * (x - mean[1][j]);
    }
    correct += (d1 < d0 ? 1u : 0u) == t.test.y[i];
  }
  return static_cast<double>(correct) / t.test.size();
}

}  // namespace

TEST(SplitSynthetic, WellSeparatedBlobsAreLinearlySeparable) {
  const auto seq = make_split_synthetic(5, 250, 10, 8.0, 1);
  EXPECT_GT(two_blob_bayes_accuracy(8.0), 0.999);
  for (const auto& t : seq.tasks) EXPECT_GE(linear_accuracy(t), 0.99);
}

TEST(SplitSynthetic, DeterministicPerSeed) {
  const auto a = make_split_synthetic(3, 20, 4, 5.0, 2), b = make_split_synthetic(3, 20, 4, 5.0, 2);
  const auto c = make_split_synthetic(3, 20, 4, 5.0, 3);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(a.tasks[t].train.x, b.tasks[t].train.x);
    EXPECT_EQ(a.tasks[t].test.y, b.tasks[t].test.y);
  }
  EXPECT_NE(a.tasks[0].train.x, c.tasks[0].train.x);
}

TEST(SplitSynthetic, DisjointClassPairs) {
  const auto seq = make_split_synthetic(5, 10, 3, 5.0, 4);
  ASSERT_EQ(seq.tasks.size(), 5u);
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_EQ(seq.tasks[t].class_map, (std::vector<std::size_t>{2 * t, 2 * t + 1}));
    EXPECT_FALSE(seq.tasks[t].boundary);
  }
  EXPECT_EQ(seq.global_classes(), 10u);
  EXPECT_THROW(make_split_synthetic(0, 10, 3, 5.0, 4), std::invalid_argument);
}

TEST(SplitSynthetic, BalancedBoundedAndValid) {
  const auto seq = make_split_synthetic(2, 30, 6, 5.0, 5, 40);
  for (const auto& t : seq.tasks) {
    EXPECT_NO_THROW(t.train.validate());
    EXPECT_NO_THROW(t.test.validate());
    EXPECT_EQ(std::count(t.train.y.begin(), t.train.y.end(), 0u), 30);
    EXPECT_EQ(std::count(t.test.y.begin(), t.test.y.end(), 1u), 40);
    for (double v : t.train.x.values()) EXPECT_LT(std::abs(v), 2.0 + 5.0 + kBlobClip);
  }
}

TEST(SplitSynthetic, TrainAndTestDoNotShareRows) {
  const auto seq = make_split_synthetic(2, 50, 4, 5.0, 6);
  for (const auto& t : seq.tasks) {
    std::set<std::vector<double>> train_rows;
    const std::size_t d = t.train.dim();
    for (std::size_t i = 0; i < t.train.size(); ++i)
      train_rows.emplace(t.train.x.data() + i * d, t.train.x.data() + (i + 1) * d);
    for (std::size_t i = 0; i < t.test.size(); ++i)
      EXPECT_EQ(train_rows.count(std::vector<double>(t.test.x.data() + i * d, t.test.x.data() + (i + 1) * d)), 0u);
  }
}

TEST(Permuted, FirstTaskIsBaseAndOthersPermuteRows) {
  const Task base = make_blob_classes(4, 20, 8, 5.0, 7);
  const auto seq = make_permuted(base, 3, 8);
  EXPECT_TRUE(seq.shared_label_space);
  EXPECT_EQ(seq.tasks[0].train.x, base.train.x);
  EXPECT_EQ(seq.tasks[0].test.x, base.test.x);
  const std::size_t d = 8;
  for (std::size_t t = 1; t < 3; ++t) {
    EXPECT_NE(seq.tasks[t].train.x, base.train.x);
    EXPECT_EQ(seq.tasks[t].train.y, base.train.y);
    for (std::size_t i = 0; i < base.train.size(); ++i) {
      std::vector<double> a(base.train.x.data() + i * d, base.train.x.data() + (i + 1) * d);
      std::vector<double> b(seq.tasks[t].train.x.data() + i * d, seq.tasks[t].train.x.data() + (i + 1) * d);
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      ASSERT_EQ(a, b);
    }
  }
  const auto again = make_permuted(base, 3, 8);
  EXPECT_EQ(again.tasks[2].train.x, seq.tasks[2].train.x);
}

TEST(IncreasingDifficulty, BoundariesAndOverlap) {
  const auto seq = make_increasing_difficulty(9, 50, 5, 20);
  ASSERT_EQ(seq.tasks.size(), 6u);
  for (std::size_t t = 0; t < 6; ++t) EXPECT_EQ(seq.tasks[t].boundary, t == 2 || t == 4) << t;
  EXPECT_GT(two_blob_bayes_accuracy(kIncreasingSeparations[0]), two_blob_bayes_accuracy(kIncreasingSeparations[2]));
  EXPECT_GT(kIncreasingSeparations[0], kIncreasingSeparations[1]);
  EXPECT_GT(kIncreasingSeparations[1], kIncreasingSeparations[2]);
  EXPECT_EQ(make_increasing_difficulty(9, 50, 5, 20).tasks[5].train.x, seq.tasks[5].train.x);
}

TEST(BayesAccuracy, MatchesMonteCarlo) {
  // Two unit-variance blobs whose means are `sep` apart: Phi(sep / 2).
  EXPECT_NEAR(two_blob_bayes_accuracy(2.0), 0.841344746, 1e-8);
  const Task t = detail::two_blob_task(3, 2.0, 20000, 20000, RngStream(10));
  EXPECT_NEAR(linear_accuracy(t), two_blob_bayes_accuracy(2.0), 0.01);
}

TEST(Subsample, StratifiedAndSeeded) {
  const Task base = make_blob_classes(3, 40, 2, 5.0, 11);
  const Dataset s = subsample(base.train, 10, 12);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(std::count(s.y.begin(), s.y.end(), c), 10);
  EXPECT_EQ(subsample(base.train, 10, 12).x, s.x);
  EXPECT_NE(subsample(base.train, 10, 13).x, s.x);
  const Dataset all = subsample(base.train, 1000, 12);
  EXPECT_EQ(all.size(), base.train.size());
}

TEST(SplitByClassPairs, RelabelsPairs) {
  Dataset ds{Tensor::matrix(6, 1, {0, 1, 2, 3, 4, 5}), {0, 1, 2, 3, 0, 3}, 4};
  const auto seq = split_by_class_pairs(ds, ds, 2);
  EXPECT_EQ(seq.tasks[1].train.y, (std::vector<std::size_t>{0, 1, 1}));
  EXPECT_EQ(seq.tasks[1].train.x, Tensor::matrix(3, 1, {2, 3, 5}));
  EXPECT_EQ(seq.tasks[1].class_map, (std::vector<std::size_t>{2, 3}));
}

TEST(Dataset, ValidateCatchesInconsistency) {
  Dataset ds{Tensor::matrix(2, 1, {0, 1}), {0}, 2};
  EXPECT_THROW(ds.validate(), std::invalid_argument);
  ds.y = {0, 2};
  EXPECT_THROW(ds.validate(), std::invalid_argument);
  ds.y = {0, 1};
  ds.x[0] = std::nan("");
  EXPECT_THROW(ds.validate(), std::invalid_argument);
}
