#ifndef POLICYFORGE_NUMERIC_TENSOR_HPP_
#define POLICYFORGE_NUMERIC_TENSOR_HPP_

#include <Eigen/Core>

#include <cmath>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace policyforge {

// Dense n-d array over a flat row-major Eigen buffer. Storage is shared and
// treated as immutable once a tensor leaves the op that produced it, so
// copies are cheap and tensors can be read concurrently.
template <typename Scalar>
class TensorT {
 public:
  using Flat = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using FlatMap = Eigen::Map<Flat>;
  using ConstFlatMap = Eigen::Map<const Flat>;
  using MatrixRM =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<MatrixRM>;
  using ConstMatMap = Eigen::Map<const MatrixRM>;

  TensorT() = default;

  explicit TensorT(std::vector<int> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<Flat>(Flat::Zero(count(shape_)))) {}

  TensorT(std::vector<int> shape, std::shared_ptr<Flat> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (!data_ || data_->size() != count(shape_)) {
      throw std::invalid_argument("tensor: shape/data size mismatch");
    }
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

  static TensorT uninit(std::vector<int> shape) {
    auto data = std::make_shared<Flat>(count(shape));
    return TensorT(std::move(shape), std::move(data));
  }

  static TensorT full(std::vector<int> shape, Scalar v) {
    TensorT t = uninit(std::move(shape));
    t.mut().setConstant(v);
    return t;
  }

  static TensorT scalar(Scalar v) { return full({1}, v); }

  static TensorT from_values(std::vector<int> shape,
                             std::initializer_list<Scalar> vals) {
    TensorT t = uninit(std::move(shape));
    if (static_cast<Eigen::Index>(vals.size()) != t.size()) {
      throw std::invalid_argument("tensor: value count mismatch");
    }
    Eigen::Index i = 0;
    for (Scalar v : vals) t.mut()[i++] = v;
    return t;
  }

  static TensorT from_vector(std::vector<int> shape,
                             const std::vector<Scalar>& vals) {
    TensorT t = uninit(std::move(shape));
    if (static_cast<Eigen::Index>(vals.size()) != t.size()) {
      throw std::invalid_argument("tensor: value count mismatch");
    }
    std::copy(vals.begin(), vals.end(), t.mut().data());
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Eigen::Index size() const { return data_ ? data_->size() : 0; }

  ConstFlatMap flat() const { return ConstFlatMap(data_->data(), data_->size()); }

  // Mutation is only valid while the producing op still owns the buffer.
  FlatMap mut() { return FlatMap(data_->data(), data_->size()); }

  const Scalar* data() const { return data_->data(); }
  Scalar* data_mut() { return data_->data(); }

  Scalar value() const {
    if (size() != 1) throw std::invalid_argument("tensor: not a scalar");
    return (*data_)[0];
  }

  Scalar operator[](Eigen::Index i) const { return (*data_)[i]; }

  // 2-d row-major matrix view
  ConstMatMap mat() const {
    check_rank2();
    return ConstMatMap(data_->data(), shape_[0], shape_[1]);
  }
  MatMap mat_mut() {
    check_rank2();
    return MatMap(data_->data(), shape_[0], shape_[1]);
  }

  // arbitrary [rows, cols] view over the flat buffer
  ConstMatMap view(int rows, int cols) const {
    if (static_cast<Eigen::Index>(rows) * cols != size()) {
      throw std::invalid_argument("tensor: bad view extents");
    }
    return ConstMatMap(data_->data(), rows, cols);
  }
  MatMap view_mut(int rows, int cols) {
    if (static_cast<Eigen::Index>(rows) * cols != size()) {
      throw std::invalid_argument("tensor: bad view extents");
    }
    return MatMap(data_->data(), rows, cols);
  }

  TensorT reshaped(std::vector<int> shape) const {
    if (count(shape) != size()) {
      throw std::invalid_argument("tensor: reshape size mismatch");
    }
    return TensorT(std::move(shape), data_);
  }

  TensorT clone() const {
    TensorT t = uninit(shape_);
    t.mut() = flat();
    return t;
  }

  bool all_finite() const { return flat().isFinite().all(); }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      os << shape_[i] << (i + 1 < shape_.size() ? "," : "");
    }
    os << ']';
    return os.str();
  }

  static Eigen::Index count(const std::vector<int>& shape) {
    Eigen::Index n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("tensor: non-positive extent");
      n *= d;
    }
    return n;
  }

 private:
  void check_rank2() const {
    if (shape_.size() != 2) {
      throw std::invalid_argument("tensor: expected rank 2, got " + shape_str());
    }
  }

  std::vector<int> shape_;
  std::shared_ptr<Flat> data_;
};

using Tensor = TensorT<float>;

}  // namespace policyforge

#endif  // POLICYFORGE_NUMERIC_TENSOR_HPP_
