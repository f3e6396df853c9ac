#include "twostep/numdiff.hpp"

#include <cmath>

namespace twostep {

namespace {

double checked(double v, const char* what, Index i, Index j = -1) {
  if (!std::isfinite(v)) {
    std::string msg = std::string("non-finite function value in ") + what + " at coordinate " + std::to_string(i);
    if (j >= 0) msg += "," + std::to_string(j);
    throw NumericalError(msg);
  }
  return v;
}

}  // namespace

VectorXd numeric_gradient(const ScalarFunction& f, const VectorXd& x, double step) {
  if (!(step > 0)) throw InputError("numeric_gradient needs a positive step");
  VectorXd g(x.size());
  VectorXd probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double h = probe_offset(step, x(i));
    probe(i) = x(i) + h;
    const double up = checked(f(probe), "numeric_gradient", i);
    probe(i) = x(i) - h;
    const double down = checked(f(probe), "numeric_gradient", i);
    probe(i) = x(i);
    g(i) = (up - down) / (2.0 * h);
  }
  return g;
}

VectorXd forward_gradient(const ScalarFunction& f, const VectorXd& x, double step) {
  VectorXd g(x.size());
  VectorXd probe = x;
  const double f0 = checked(f(x), "forward_gradient", -1);
  for (Index i = 0; i < x.size(); ++i) {
    const double h = probe_offset(step, x(i));
    probe(i) = x(i) + h;
    g(i) = (checked(f(probe), "forward_gradient", i) - f0) / h;
    probe(i) = x(i);
  }
  return g;
}

MatrixXd numeric_hessian_block(const PairFunction& f, const VectorXd& a, const VectorXd& b, double step) {
  if (!(step > 0)) throw InputError("numeric_hessian_block needs a positive step");
  MatrixXd out(a.size(), b.size());
  VectorXd pa = a;
  VectorXd pb = b;
  for (Index i = 0; i < a.size(); ++i) {
    const double hi = probe_offset(step, a(i));
    for (Index j = 0; j < b.size(); ++j) {
      const double hj = probe_offset(step, b(j));
      pa(i) = a(i) + hi;
      pb(j) = b(j) + hj;
      const double pp = checked(f(pa, pb), "numeric_hessian_block", i, j);
      pb(j) = b(j) - hj;
      const double pm = checked(f(pa, pb), "numeric_hessian_block", i, j);
      pa(i) = a(i) - hi;
      const double mm = checked(f(pa, pb), "numeric_hessian_block", i, j);
      pb(j) = b(j) + hj;
      const double mp = checked(f(pa, pb), "numeric_hessian_block", i, j);
      pa(i) = a(i);
      pb(j) = b(j);
      out(i, j) = -(pp - pm - mp + mm) / (4.0 * hi * hj);
    }
  }
  return out;
}

MatrixXd numeric_information(const ScalarFunction& f, const VectorXd& x, double step) {
  const Index d = x.size();
  MatrixXd raw(d, d);
  VectorXd probe = x;
  auto eval = [&](Index i, double di, Index j, double dj) {
    probe = x;
    probe(i) += di;
    probe(j) += dj;
    return checked(f(probe), "numeric_information", i, j);
  };
  for (Index i = 0; i < d; ++i) {
    const double hi = probe_offset(step, x(i));
    for (Index j = i; j < d; ++j) {
      const double hj = probe_offset(step, x(j));
      const double pp = eval(i, hi, j, hj);
      const double pm = eval(i, hi, j, -hj);
      const double mp = eval(i, -hi, j, hj);
      const double mm = eval(i, -hi, j, -hj);
      raw(i, j) = -(pp - pm - mp + mm) / (4.0 * hi * hj);
      raw(j, i) = raw(i, j);  // stencil points coincide for (i, j) and (j, i)
    }
  }
  return raw;
}

}  // namespace twostep
