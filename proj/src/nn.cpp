#include "avih/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "avih/digest.hpp"

namespace avih::nn {

Tensor uniform_init(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    // He-uniform: keeps activation scale stable through deep ReLU stacks.
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

Conv2d::Conv2d(int c_in, int c_out, int kernel, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
    const std::int64_t fan_in = static_cast<std::int64_t>(c_in) * kernel * kernel;
    w = leaf(uniform_init({c_out, c_in, kernel, kernel}, fan_in, rng));
    b = leaf(uniform_init({c_out}, fan_in, rng));
}

ConvTranspose2d::ConvTranspose2d(int c_in, int c_out, Rng& rng) {
    const std::int64_t fan_in = static_cast<std::int64_t>(c_in) * 4;
    w = leaf(uniform_init({c_in, c_out, 2, 2}, fan_in, rng));
    b = leaf(uniform_init({c_out}, fan_in, rng));
}

Linear::Linear(int d_in, int d_out, Rng& rng) {
    w = leaf(uniform_init({d_out, d_in}, d_in, rng));
    b = leaf(uniform_init({d_out}, d_in, rng));
}

InstanceNorm2d::InstanceNorm2d(int channels) {
    gamma = leaf(Tensor::full({channels}, 1.0));
    beta = leaf(Tensor({channels}));
}

GroupNorm::GroupNorm(int channels, int groups_) : groups(groups_) {
    gamma = leaf(Tensor::full({channels}, 1.0));
    beta = leaf(Tensor({channels}));
}

std::vector<Var> Model::params() const {
    std::vector<std::pair<std::string, Var>> named;
    named_params(named);
    std::vector<Var> out;
    out.reserve(named.size());
    for (auto& [name, v] : named) out.push_back(v);
    return out;
}

namespace {

template <typename T>
void append_bytes(std::vector<std::uint8_t>& buf, const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
}

}  // namespace

std::vector<std::uint8_t> Model::serialize() const {
    std::vector<std::pair<std::string, Var>> named;
    named_params(named);
    std::vector<std::uint8_t> buf;
    const char magic[8] = {'A', 'V', 'I', 'H', 'W', '0', '0', '1'};
    buf.insert(buf.end(), magic, magic + 8);
    append_bytes(buf, static_cast<std::uint64_t>(named.size()));
    for (const auto& [name, v] : named) {
        append_bytes(buf, static_cast<std::uint64_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        append_bytes(buf, static_cast<std::uint64_t>(v->value.rank()));
        for (auto d : v->value.shape()) append_bytes(buf, static_cast<std::int64_t>(d));
        const auto* p = reinterpret_cast<const std::uint8_t*>(v->value.data());
        buf.insert(buf.end(), p, p + sizeof(double) * v->value.numel());
    }
    return buf;
}

std::string Model::weight_digest() const {
    auto bytes = serialize();
    return sha256_hex(bytes);
}

void Model::save(const std::string& path) const {
    auto bytes = serialize();
    std::ofstream out(path, std::ios::binary);
    AVIH_CHECK(static_cast<bool>(out), "Model::save: cannot open " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    AVIH_CHECK(static_cast<bool>(out), "Model::save: write failed for " + path);
}

void Model::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    AVIH_CHECK(static_cast<bool>(in), "Model::load: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    AVIH_CHECK(in && std::memcmp(magic, "AVIHW001", 8) == 0,
               "Model::load: bad checkpoint magic in " + path);
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    std::vector<std::pair<std::string, Var>> named;
    named_params(named);
    AVIH_CHECK(count == named.size(), "Model::load: parameter count mismatch in " + path);
    for (auto& [name, v] : named) {
        std::uint64_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        std::string got(name_len, '\0');
        in.read(got.data(), static_cast<std::streamsize>(name_len));
        AVIH_CHECK(got == name, "Model::load: parameter name mismatch: expected " + name +
                                    ", got " + got);
        std::uint64_t rank = 0;
        in.read(reinterpret_cast<char*>(&rank), sizeof(rank));
        AVIH_CHECK(rank == v->value.rank(), "Model::load: rank mismatch for " + name);
        for (std::size_t i = 0; i < rank; ++i) {
            std::int64_t d = 0;
            in.read(reinterpret_cast<char*>(&d), sizeof(d));
            AVIH_CHECK(d == v->value.shape()[i], "Model::load: shape mismatch for " + name);
        }
        in.read(reinterpret_cast<char*>(v->value.data()),
                static_cast<std::streamsize>(sizeof(double) * v->value.numel()));
        AVIH_CHECK(static_cast<bool>(in), "Model::load: truncated checkpoint " + path);
    }
}

Adam::Adam(std::vector<Var> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) {
        if (p->grad_ready) p->grad.fill(0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Var& p = params_[i];
        const bool has_grad = p->grad_ready;
        for (std::int64_t j = 0; j < p->value.numel(); ++j) {
            const double g = has_grad ? p->grad[j] : 0.0;
            m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
            v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
            const double mhat = m_[i][j] / bc1;
            const double vhat = v_[i][j] / bc2;
            p->value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

}  // namespace avih::nn
