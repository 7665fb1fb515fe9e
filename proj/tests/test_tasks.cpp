#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <unistd.h>

#include "cmaml/error.hpp"
#include "cmaml/linalg.hpp"
#include "cmaml/tasks.hpp"

using namespace cmaml;
using namespace cmaml::tasks;

namespace {

std::vector<std::size_t> histogram(const std::vector<std::size_t>& labels, std::size_t n) {
  std::vector<std::size_t> h(n, 0);
  for (std::size_t y : labels) ++h.at(y);
  return h;
}

// Feature f0 carries the row index so episodes can be traced back to rows.
CsvDataset indexed_dataset(std::size_t classes, std::size_t rows_per_class, std::size_t split_train) {
  const std::size_t m = classes * rows_per_class;
  Tensor features(Shape{m, 2});
  std::vector<std::string> labels;
  std::map<std::string, std::string> split;
  for (std::size_t r = 0; r < m; ++r) {
    features.at(r, 0) = static_cast<double>(r);
    features.at(r, 1) = static_cast<double>(r % 7);
    labels.push_back("c" + std::to_string(r / rows_per_class));
  }
  for (std::size_t c = 0; c < classes; ++c) split["c" + std::to_string(c)] = c < split_train ? "train" : "test";
  return CsvDataset(std::move(features), std::move(labels), std::move(split));
}

std::vector<std::size_t> row_ids(const Tensor& x) {
  std::vector<std::size_t> ids;
  for (std::size_t r = 0; r < x.rows(); ++r) ids.push_back(static_cast<std::size_t>(x.at(r, 0)));
  return ids;
}

class TempDir {
 public:
  TempDir() : path_(std::filesystem::temp_directory_path() / ("cmaml_tasks_" + std::to_string(::getpid()))) {
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::filesystem::path file(const std::string& name, const std::string& content) const {
    std::ofstream(path_ / name) << content;
    return path_ / name;
  }
  std::filesystem::path missing() const { return path_ / "missing.csv"; }

 private:
  std::filesystem::path path_;
};

}  // namespace

TEST(Gaussian, EpisodeShapesAndHistogram) {
  GaussianTaskGen gen;
  gen.k_shot = 5;
  std::mt19937_64 rng(1);
  const Task t = sample_gaussian_episode(gen, rng);
  EXPECT_EQ(t.support_x.shape(), (Shape{25, 16}));
  EXPECT_EQ(t.query_x.shape(), (Shape{80, 16}));
  EXPECT_EQ(histogram(t.support_y, 5), std::vector<std::size_t>(5, 5));
  EXPECT_EQ(histogram(t.query_y, 5), std::vector<std::size_t>(5, 16));
  EXPECT_NO_THROW(t.validate());
}

TEST(Gaussian, SameSeedSameEpisode) {
  const GaussianTaskGen gen;
  std::mt19937_64 a(derive_seed(7, 3)), b(derive_seed(7, 3)), c(derive_seed(7, 4));
  const Task ta = sample_gaussian_episode(gen, a);
  const Task tb = sample_gaussian_episode(gen, b);
  const Task tc = sample_gaussian_episode(gen, c);
  EXPECT_EQ(ta.support_x, tb.support_x);
  EXPECT_EQ(ta.query_x, tb.query_x);
  EXPECT_NE(ta.support_x, tc.support_x);
}

TEST(Gaussian, TinyNoiseIsSeparableByNearestCentroid) {
  GaussianTaskGen gen;
  gen.noise_sigma = 1e-6;
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::mt19937_64 rng(derive_seed(11, s));
    const Task t = sample_gaussian_episode(gen, rng);
    std::size_t correct = 0;
    for (std::size_t r = 0; r < t.query_x.rows(); ++r) {
      std::size_t best = 0;
      double best_d = INFINITY;
      for (std::size_t c = 0; c < t.n_way; ++c) {
        double d = 0.0;
        for (std::size_t j = 0; j < gen.dim; ++j) d += std::pow(t.query_x.at(r, j) - t.support_x.at(c, j), 2);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      correct += best == t.query_y[r];
    }
    EXPECT_EQ(correct, t.query_x.rows());
  }
}

TEST(Gaussian, CentersInsideBall) {
  GaussianTaskGen gen;
  gen.noise_sigma = 1e-9;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    const Task t = sample_gaussian_episode(gen, rng);
    for (std::size_t r = 0; r < t.support_x.rows(); ++r) {
      double n = 0.0;
      for (std::size_t j = 0; j < gen.dim; ++j) n += t.support_x.at(r, j) * t.support_x.at(r, j);
      EXPECT_LE(std::sqrt(n), gen.mean_scale + 1e-6);
    }
  }
}

TEST(Gaussian, InvalidGenerator) {
  GaussianTaskGen gen;
  std::mt19937_64 rng(0);
  gen.noise_sigma = 0.0;
  EXPECT_THROW(sample_gaussian_episode(gen, rng), ConfigError);
  gen = GaussianTaskGen{};
  gen.mean_scale = -1.0;
  EXPECT_THROW(sample_gaussian_episode(gen, rng), ConfigError);
}

TEST(DeriveSeed, DistinctStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(42, i));
  EXPECT_EQ(seen.size(), 1000u);
  EXPECT_EQ(derive_seed(42, 5), derive_seed(42, 5));
}

TEST(Csv, SupportAndQueryAreDisjoint) {
  const CsvDataset ds = indexed_dataset(10, 12, 8);
  std::mt19937_64 rng(3);
  for (int draw = 0; draw < 1000; ++draw) {
    const Task t = sample_csv_episode(ds, "train", 5, 2, 4, rng);
    const auto s = row_ids(t.support_x), q = row_ids(t.query_x);
    std::set<std::size_t> all(s.begin(), s.end());
    all.insert(q.begin(), q.end());
    ASSERT_EQ(all.size(), s.size() + q.size());
    for (std::size_t id : all) ASSERT_LT(id / 12, 8u);  // train classes only
    // Episode-local labels follow the drawn class order.
    for (std::size_t r = 0; r < s.size(); ++r) ASSERT_EQ(s[r] / 12, s[t.support_y[r] * 2] / 12);
    for (std::size_t r = 0; r < q.size(); ++r) ASSERT_EQ(q[r] / 12, s[t.query_y[r] * 2] / 12);
  }
}

TEST(Csv, ExhaustionCase) {
  const CsvDataset ds = indexed_dataset(5, 6, 5);
  std::mt19937_64 rng(8);
  const Task t = sample_csv_episode(ds, "train", 5, 2, 4, rng);
  auto ids = row_ids(t.support_x);
  const auto q = row_ids(t.query_x);
  ids.insert(ids.end(), q.begin(), q.end());
  EXPECT_EQ(std::set<std::size_t>(ids.begin(), ids.end()).size(), 30u);
}

TEST(Csv, Determinism) {
  const CsvDataset ds = indexed_dataset(10, 12, 8);
  std::mt19937_64 a(99), b(99);
  const Task ta = sample_csv_episode(ds, "train", 5, 1, 3, a);
  const Task tb = sample_csv_episode(ds, "train", 5, 1, 3, b);
  EXPECT_EQ(ta.support_x, tb.support_x);
  EXPECT_EQ(ta.query_x, tb.query_x);
}

TEST(Csv, InsufficientData) {
  const CsvDataset ds = indexed_dataset(10, 5, 8);
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_csv_episode(ds, "test", 5, 1, 1, rng), ConfigError);
  EXPECT_THROW(sample_csv_episode(ds, "train", 5, 2, 4, rng), ConfigError);
  EXPECT_THROW(sample_csv_episode(ds, "val", 2, 1, 1, rng), ConfigError);
}

TEST(Csv, LoadFromFiles) {
  TempDir dir;
  const auto csv = dir.file("data.csv", "f0,f1,label\n1.5,2,a\n3,4,b\n5,6,a\n7,8,c\n");
  const auto splits = dir.file("splits.csv", "class_id,split\na,train\nb,train\nc,test\n");
  const CsvDataset ds = CsvDataset::load(csv, splits);
  EXPECT_EQ(ds.dim(), 2u);
  EXPECT_EQ(ds.classes("train"), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ds.classes("test"), (std::vector<std::string>{"c"}));
  EXPECT_TRUE(ds.classes("val").empty());
  EXPECT_EQ(ds.rows_of("a"), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(ds.features().at(0, 0), 1.5);
}

TEST(Csv, LoadErrors) {
  TempDir dir;
  const auto splits = dir.file("splits.csv", "a,train\nb,test\n");
  EXPECT_THROW(CsvDataset::load(dir.file("h.csv", "x,y,label\n1,2,a\n"), splits), IoError);
  EXPECT_THROW(CsvDataset::load(dir.file("n.csv", "f0,label\nabc,a\n"), splits), IoError);
  EXPECT_THROW(CsvDataset::load(dir.file("w.csv", "f0,label\n1,2,a\n"), splits), IoError);
  EXPECT_THROW(CsvDataset::load(dir.file("u.csv", "f0,label\n1,a\n2,zz\n"), splits), ConfigError);
  EXPECT_THROW(CsvDataset::load(dir.missing(), splits), IoError);
}

TEST(Csv, SplitErrors) {
  TempDir dir;
  const auto csv = dir.file("d.csv", "f0,label\n1,a\n2,b\n");
  EXPECT_THROW(CsvDataset::load(csv, dir.file("s1.csv", "a,train\nb,holdout\n")), ConfigError);
  EXPECT_THROW(CsvDataset::load(csv, dir.file("s2.csv", "a,train\na,test\nb,test\n")), ConfigError);
}

TEST(Quadratic, ConditionNumberByConstruction) {
  for (double kappa : {1.0, 2.0, 50.0, 1000.0}) {
    const QuadraticProblem p = quadratic_problem(kappa);
    const auto e = linalg::jacobi_eigen(linalg::SymMatrix(p.a));
    EXPECT_NEAR(linalg::condition_number(e.values.data(), 1e-300), kappa, 1e-9 * kappa);
    EXPECT_GT(e.values[0], 0.0);
  }
  EXPECT_THROW(quadratic_problem(0.5), ConfigError);
}

TEST(Quadratic, UnitKappaIsIdentity) {
  const QuadraticProblem p = quadratic_problem(1.0);
  EXPECT_LE(max_abs_diff(p.a, Tensor::identity(2)), 1e-15);
}

TEST(Quadratic, IteratesMatchClosedForm) {
  for (double kappa : {1.0, 50.0}) {
    const QuadraticProblem p = quadratic_problem(kappa);
    const auto iterates = quadratic_descent(p, 0.5, 10);
    ASSERT_EQ(iterates.size(), 11u);
    Tensor step = Tensor::identity(2);
    for (std::size_t i = 0; i < 4; ++i) step[i] -= 0.5 * p.a[i];
    Tensor expected = p.theta0.reshaped(Shape{2, 1});
    for (std::size_t t = 0; t <= 10; ++t) {
      EXPECT_LE(max_abs_diff(iterates[t], expected.reshaped(Shape{2})), 1e-12) << "kappa " << kappa << " t " << t;
      expected = matmul(step, expected);
    }
  }
}

TEST(Quadratic, ContractionRates) {
  const auto fast = quadratic_descent(quadratic_problem(1.0), 0.5, 10);
  EXPECT_LE(frobenius_norm(fast.back()), 1e-3 * frobenius_norm(fast.front()));
  const auto slow = quadratic_descent(quadratic_problem(50.0), 0.5, 10);
  EXPECT_GE(frobenius_norm(slow.back()) / frobenius_norm(slow.front()), 0.3);
}
