#include <doctest.h>

#include "dnln/ops.hpp"
#include "dnln/tensor.hpp"

using namespace dnln;

TEST_SUITE("tensor") {

TEST_CASE("numel matches data length and strides are row-major") {
  Tensor t({2, 3, 4}, 1.5);
  CHECK(t.numel() == 24);
  CHECK(t.data().size() == 24);
  CHECK(shape_strides(t.shape()) == std::vector<std::size_t>{12, 4, 1});
  CHECK(t.offset({1, 2, 3}) == 1 * 12 + 2 * 4 + 3);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(t.offset({2, 0, 0}), std::out_of_range);
}

TEST_CASE("at reads the row-major element") {
  Tensor t({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  CHECK(t.at(1, 2) == 5);
  CHECK(t.at(0, 1) == 1);
}

TEST_CASE("copies alias storage; detach copies") {
  Tensor a({3}, 1.0);
  Tensor b = a;
  b.mutable_data()[0] = 7;
  CHECK(a.at(0) == 7);
  Tensor c = a.detach();
  c.mutable_data()[1] = 9;
  CHECK(a.at(1) == 1);
  CHECK_FALSE(c.same_storage(a));
}

TEST_CASE("sum backward gives ones") {
  Tensor x({4}, std::vector<double>{1, -2, 3, 0.5});
  x.set_requires_grad();
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("sum of x*x at [1,2,3] has gradient [2,4,6]") {
  Tensor x({3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad();
  sum(mul(x, x)).backward();
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
  CHECK(x.grad()[2] == 6.0);
}

TEST_CASE("grad has the shape of data") {
  Tensor x({2, 3}, 0.5);
  x.set_requires_grad();
  sum(scale(x, 2.0)).backward();
  CHECK(x.grad().size() == x.numel());
}

TEST_CASE("repeated backward accumulates until cleared") {
  Tensor x({2}, std::vector<double>{1, 2});
  x.set_requires_grad();
  Tensor loss = sum(scale(x, 3.0));
  loss.backward();
  loss.backward();
  CHECK(x.grad()[0] == 6.0);
  x.zero_grad();
  loss.backward();
  CHECK(x.grad()[0] == 3.0);
}

TEST_CASE("backward on a non-scalar is rejected") {
  Tensor x({2}, 1.0);
  x.set_requires_grad();
  Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(y.backward(), std::invalid_argument);
}

TEST_CASE("diamond graphs accumulate both paths") {
  Tensor x({1}, std::vector<double>{2.0});
  x.set_requires_grad();
  Tensor a = scale(x, 3.0);
  Tensor b = mul(a, x);  // 3x^2
  sum(add(a, b)).backward();
  CHECK(x.grad()[0] == doctest::Approx(3.0 + 12.0).epsilon(1e-15));
}

TEST_CASE("add passes gradients unchanged; concat splits at the boundary") {
  Tensor a({2, 1, 1}, std::vector<double>{1, 2}), b({3, 1, 1}, std::vector<double>{3, 4, 5});
  a.set_requires_grad();
  b.set_requires_grad();
  Tensor w({5, 1, 1}, std::vector<double>{10, 20, 30, 40, 50});
  sum(mul(concat_channels({a, b}), w)).backward();
  CHECK(a.grad()[0] == 10);
  CHECK(a.grad()[1] == 20);
  CHECK(b.grad()[0] == 30);
  CHECK(b.grad()[2] == 50);

  Tensor c({3}, 1.0), d({3}, 2.0);
  c.set_requires_grad();
  d.set_requires_grad();
  sum(mul(add(c, d), Tensor({3}, std::vector<double>{1, 2, 3}))).backward();
  CHECK(c.grad()[1] == 2);
  CHECK(d.grad()[2] == 3);
}

TEST_CASE("no tape is recorded under NoGradGuard or without grad inputs") {
  Tensor x({2}, 1.0);
  x.set_requires_grad();
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    CHECK(scale(x, 2.0).node() == nullptr);
  }
  CHECK(grad_enabled());
  CHECK(scale(x, 2.0).node() != nullptr);
  CHECK(scale(Tensor({2}, 1.0), 2.0).node() == nullptr);
}

TEST_CASE("requires_grad can only be set on leaves") {
  Tensor x({2}, 1.0);
  x.set_requires_grad();
  Tensor y = scale(x, 2.0);
  CHECK_THROWS(y.set_requires_grad());
  CHECK(x.is_leaf());
  CHECK_FALSE(y.is_leaf());
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Tensor x({5}, std::vector<double>{0.1, -0.3, 0.7, 1.1, -2.0});
    x.set_requires_grad();
    Tensor h = sigmoid(mul(x, x));
    sum(add(mul(h, x), scale(h, 0.3))).backward();
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  CHECK(run() == run());
}

}
