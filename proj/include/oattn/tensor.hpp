#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace oattn {

using IndexList = std::shared_ptr<const std::vector<int>>;

inline IndexList make_index_list(std::vector<int> v) {
    return std::make_shared<const std::vector<int>>(std::move(v));
}

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Numeric failures (shape mismatches, bad indices, non-finite values) and
// contract violations in the tape all throw TapeError.
class TapeError : public std::runtime_error {
public:
    explicit TapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense n-d array. `grad` stays empty unless gradient is enabled; a detached
// tensor is simply one whose grad was never allocated.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), T(0)) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != numel(shape))
            throw TapeError("tensor: data length " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    }

    std::int64_t size() const { return numel(shape); }

    void enable_grad() { grad.assign(data.size(), T(0)); }
    void zero_grad() { grad.assign(grad.size(), T(0)); }
    bool has_grad() const { return !grad.empty(); }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
};

// Trainable, uniquely named tensor. Fusion gate scalars and the like start
// at zero by construction; values come from the model builders.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {
        value.enable_grad();
    }
};

template <typename T>
class ParamSet {
public:
    int add(std::string name, Tensor<T> value) {
        for (const auto& p : params_)
            if (p.name == name) throw TapeError("duplicate parameter name: " + name);
        params_.emplace_back(std::move(name), std::move(value));
        return static_cast<int>(params_.size()) - 1;
    }

    Parameter<T>& operator[](int i) { return params_[static_cast<std::size_t>(i)]; }
    const Parameter<T>& operator[](int i) const { return params_[static_cast<std::size_t>(i)]; }

    int find(const std::string& name) const {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name == name) return static_cast<int>(i);
        return -1;
    }

    int count() const { return static_cast<int>(params_.size()); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grads() {
        for (auto& p : params_) p.value.zero_grad();
    }

private:
    std::vector<Parameter<T>> params_;
};

}  // namespace oattn
