#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "mslau/error.hpp"

namespace mslau {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Live/peak byte counters over all tensor storage; the benchmark harness
// reads these to report peak working-set size.
struct MemStats {
    inline static std::atomic<long long> live{0};
    inline static std::atomic<long long> peak{0};

    static void add(long long bytes) {
        long long v = live.fetch_add(bytes) + bytes;
        long long p = peak.load();
        while (v > p && !peak.compare_exchange_weak(p, v)) {}
    }
    static void sub(long long bytes) { live.fetch_sub(bytes); }
    static void reset_peak() { peak.store(live.load()); }
};

// Dense row-major n-d array. Values are immutable by convention once an
// operation has produced them; kernels write only into freshly built outputs.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        for (int64_t e : shape_)
            if (e <= 0) throw_dim("tensor extent must be positive, got " + shape_str(shape_));
        data_.assign(shape_numel(shape_), T(0));
        track_ = int64_t(data_.size()) * int64_t(sizeof(T));
        MemStats::add(track_);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != int64_t(data_.size()))
            throw_dim("data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
        track_ = int64_t(data_.size()) * int64_t(sizeof(T));
        MemStats::add(track_);
    }

    Tensor(const Tensor& o) : shape_(o.shape_), data_(o.data_), track_(o.track_) { MemStats::add(track_); }
    Tensor(Tensor&& o) noexcept : shape_(std::move(o.shape_)), data_(std::move(o.data_)), track_(o.track_) {
        o.track_ = 0;
        o.shape_.clear();
    }
    Tensor& operator=(const Tensor& o) {
        if (this != &o) {
            MemStats::sub(track_);
            shape_ = o.shape_;
            data_ = o.data_;
            track_ = o.track_;
            MemStats::add(track_);
        }
        return *this;
    }
    Tensor& operator=(Tensor&& o) noexcept {
        if (this != &o) {
            MemStats::sub(track_);
            shape_ = std::move(o.shape_);
            data_ = std::move(o.data_);
            track_ = o.track_;
            o.track_ = 0;
            o.shape_.clear();
        }
        return *this;
    }
    ~Tensor() { MemStats::sub(track_); }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor from(Shape shape, std::initializer_list<T> vals) {
        return Tensor(std::move(shape), std::vector<T>(vals));
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return int(shape_.size()); }
    int64_t dim(int i) const { return shape_[size_t(i)]; }
    int64_t size() const { return int64_t(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](int64_t i) { return data_[size_t(i)]; }
    const T& operator[](int64_t i) const { return data_[size_t(i)]; }

    // NCHW helpers
    T& at4(int64_t b, int64_t c, int64_t h, int64_t w) {
        return data_[size_t(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    const T& at4(int64_t b, int64_t c, int64_t h, int64_t w) const {
        return data_[size_t(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    T& at3(int64_t a, int64_t b, int64_t c) { return data_[size_t((a * shape_[1] + b) * shape_[2] + c)]; }
    const T& at3(int64_t a, int64_t b, int64_t c) const { return data_[size_t((a * shape_[1] + b) * shape_[2] + c)]; }
    T& at2(int64_t r, int64_t c) { return data_[size_t(r * shape_[1] + c)]; }
    const T& at2(int64_t r, int64_t c) const { return data_[size_t(r * shape_[1] + c)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != size())
            throw_dim("reshape " + shape_str(shape_) + " -> " + shape_str(s) + " changes element count");
        Tensor out = *this;
        out.shape_ = std::move(s);
        return out;
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (int64_t i = 0; i < size(); ++i) out[i] = U(data_[size_t(i)]);
        return out;
    }

  private:
    Shape shape_;
    std::vector<T> data_;
    int64_t track_ = 0;

    template <typename U>
    friend class Tensor;
};

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw_dim(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace mslau
