#pragma once

// Column kernels for Gram assembly. This header is included by the AVX2
// translation unit, so it must stay free of inline code beyond declarations.

#include <cstddef>

namespace nsgp::simd {

enum class Isa { scalar, avx2 };

/// out[i] = variance * exp(-1/2 sum_d (rows[d][i] - col[d])^2 * inv_ls2[d]),  i < n.
using SeArdColumnFn = void (*)(const double* const* rows, std::size_t n, std::size_t dims, const double* col,
                               const double* inv_ls2, double variance, double* out);

/// Factorised Gibbs kernel against one column input:
///   out[i] = prod_d sqrt(2 a b / (a^2 + b^2)) * exp(-sum_d r^2 / (a^2 + b^2))
/// with a = row_ls[d][i], b = col_ls[d], r = rows[d][i] - col[d].
using FgkColumnFn = void (*)(const double* const* rows, const double* const* row_ls, std::size_t n,
                             std::size_t dims, const double* col, const double* col_ls, double* out);

/// out[i] = exp(in[i]).
using ExpFn = void (*)(const double* in, std::size_t n, double* out);

struct KernelTable {
    Isa isa;
    const char* name;
    SeArdColumnFn se_ard_column;
    FgkColumnFn fgk_column;
    ExpFn exp;
};

const KernelTable& scalar_table();

/// Null when the AVX2 variant was not compiled in.
const KernelTable* avx2_table();

bool cpu_supports_avx2();

/// Table used by Gram assembly. Defaults to the best supported ISA; the
/// NSGP_SIMD=scalar environment variable forces the scalar reference.
const KernelTable& active_table();

/// Overrides the active table. Returns false (and changes nothing) when the
/// requested ISA is unavailable on this build or CPU.
bool select_isa(Isa isa);

}  // namespace nsgp::simd

#if defined(NSGP_HAVE_AVX2)
namespace nsgp::simd::avx2 {
const KernelTable& table();
}
#endif
