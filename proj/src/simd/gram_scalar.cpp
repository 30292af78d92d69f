#include <cmath>

#include "nsgp/simd.hpp"

namespace nsgp::simd {

namespace {

void se_ard_column(const double* const* rows, std::size_t n, std::size_t dims, const double* col,
                   const double* inv_ls2, double variance, double* out) {
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t d = 0; d < dims; ++d) {
            const double r = rows[d][i] - col[d];
            acc += r * r * inv_ls2[d];
        }
        out[i] = variance * std::exp(-0.5 * acc);
    }
}

void fgk_column(const double* const* rows, const double* const* row_ls, std::size_t n, std::size_t dims,
                const double* col, const double* col_ls, double* out) {
    for (std::size_t i = 0; i < n; ++i) {
        double expo = 0.0;
        double pref = 1.0;
        for (std::size_t d = 0; d < dims; ++d) {
            const double a = row_ls[d][i];
            const double b = col_ls[d];
            const double s = a * a + b * b;
            const double r = rows[d][i] - col[d];
            expo += r * r / s;
            pref *= 2.0 * a * b / s;
        }
        out[i] = std::sqrt(pref) * std::exp(-expo);
    }
}

void exp_array(const double* in, std::size_t n, double* out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(in[i]);
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable table{Isa::scalar, "scalar", &se_ard_column, &fgk_column, &exp_array};
    return table;
}

}  // namespace nsgp::simd
