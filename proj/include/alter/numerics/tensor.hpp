#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace alter {

template <class Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <class Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = RowVectorX<double>;
using Index = Eigen::Index;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A named, persistent model tensor. Gradients accumulate into `grad`
/// across every tape that reads the parameter until `zero_grad`.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    bool trainable = true;

    Index rows() const { return value.rows(); }
    Index cols() const { return value.cols(); }
    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

enum class Init { uniform_fan_in, zeros, ones };

/// Owns parameters with stable addresses, iterated in registration order.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;
    ParamStore(ParamStore&&) = default;
    ParamStore& operator=(ParamStore&&) = default;

    // Uniform init draws from a generator keyed by (seed, name), so the
    // value of a parameter does not depend on registration order.
    Parameter& add(const std::string& name, Index rows, Index cols, Init init = Init::uniform_fan_in,
                   double fan_in = 0.0);

    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;

    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;
    std::vector<Parameter*> with_prefix(const std::string& prefix);

    void zero_grad();
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, Parameter*> index_;
};

}  // namespace alter
