#include "nsgp/rng.hpp"

namespace nsgp {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

Rng substream(std::uint64_t seed, std::string_view name) {
    return Rng(splitmix64(seed ^ splitmix64(fnv1a(name))));
}

Matrix standard_normal(Rng& rng, Index rows, Index cols) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix out(rows, cols);
    // Column-major fill order is part of the reproducibility contract.
    for (Index j = 0; j < cols; ++j) {
        for (Index i = 0; i < rows; ++i) out(i, j) = normal(rng);
    }
    return out;
}

}  // namespace nsgp
