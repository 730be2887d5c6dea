#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace avih {

// Contract checks throw ContractViolation with a readable message; callers
// (CLI, pipeline) translate them into machine-readable errors.
class ContractViolation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

#define AVIH_CHECK(cond, msg)                                 \
    do {                                                      \
        if (!(cond)) throw ::avih::ContractViolation(msg);    \
    } while (0)

// Dense row-major double tensor. Image batches are B x C x H x W in [0,1];
// embeddings are B x D. Value semantics throughout.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(numel_of(shape_)), 0.0);
    }
    Tensor(std::initializer_list<std::int64_t> shape)
        : Tensor(std::vector<std::int64_t>(shape)) {}

    static Tensor full(std::vector<std::int64_t> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }
    static Tensor scalar(double v) {
        Tensor t({1});
        t.data_[0] = v;
        return t;
    }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // 4-d accessors for B x C x H x W tensors.
    double& at(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x) {
        return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
    }
    double at(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x) const {
        return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double item() const {
        AVIH_CHECK(numel() == 1, "Tensor::item requires a single-element tensor");
        return data_[0];
    }

    void fill(double v) {
        for (auto& x : data_) x = v;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (auto d : shape) {
            AVIH_CHECK(d >= 0, "negative tensor dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<std::int64_t> shape_;
    std::vector<double> data_;
};

bool all_finite(const Tensor& t);
double min_value(const Tensor& t);
double max_value(const Tensor& t);

}  // namespace avih
