// AVX2 + FMA Gram column kernels. Compiled with -mavx2 -mfma; include nothing
// else here, every symbol stays in this file.

#include <immintrin.h>

#include "nsgp/simd.hpp"

namespace nsgp::simd::avx2 {

namespace {

// exp() after Cephes: x = n ln2 + r with a two-part ln2, then the (3,4) Pade
// form exp(r) = 1 + 2 r P(r^2) / (Q(r^2) - r P(r^2)). Relative error is
// within a few ulp of std::exp over the clamped range.
inline __m256d exp_pd(__m256d x) {
    const __m256d hi = _mm256_set1_pd(709.0);
    const __m256d lo = _mm256_set1_pd(-708.0);
    const __m256d log2e = _mm256_set1_pd(1.4426950408889634073599);
    const __m256d c1 = _mm256_set1_pd(6.93145751953125E-1);
    const __m256d c2 = _mm256_set1_pd(1.42860682030941723212E-6);
    const __m256d p0 = _mm256_set1_pd(1.26177193074810590878E-4);
    const __m256d p1 = _mm256_set1_pd(3.02994407707441961300E-2);
    const __m256d p2 = _mm256_set1_pd(9.99999999999999999910E-1);
    const __m256d q0 = _mm256_set1_pd(3.00198505138664455042E-6);
    const __m256d q1 = _mm256_set1_pd(2.52448340349684104192E-3);
    const __m256d q2 = _mm256_set1_pd(2.27265548208155028766E-1);
    const __m256d q3 = _mm256_set1_pd(2.00000000000000000009E0);
    const __m256d one = _mm256_set1_pd(1.0);
    const __m256d two = _mm256_set1_pd(2.0);

    const __m256d nan_mask = _mm256_cmp_pd(x, x, _CMP_UNORD_Q);
    const __m256d under = _mm256_cmp_pd(x, lo, _CMP_LT_OQ);
    x = _mm256_min_pd(_mm256_max_pd(x, lo), hi);

    const __m256d fx = _mm256_round_pd(_mm256_mul_pd(x, log2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    x = _mm256_fnmadd_pd(fx, c1, x);
    x = _mm256_fnmadd_pd(fx, c2, x);

    const __m256d xx = _mm256_mul_pd(x, x);
    __m256d px = _mm256_fmadd_pd(p0, xx, p1);
    px = _mm256_fmadd_pd(px, xx, p2);
    px = _mm256_mul_pd(px, x);
    __m256d qx = _mm256_fmadd_pd(q0, xx, q1);
    qx = _mm256_fmadd_pd(qx, xx, q2);
    qx = _mm256_fmadd_pd(qx, xx, q3);

    __m256d e = _mm256_div_pd(px, _mm256_sub_pd(qx, px));
    e = _mm256_fmadd_pd(two, e, one);

    __m256i n = _mm256_cvtepi32_epi64(_mm256_cvtpd_epi32(fx));
    n = _mm256_slli_epi64(_mm256_add_epi64(n, _mm256_set1_epi64x(1023)), 52);
    e = _mm256_mul_pd(e, _mm256_castsi256_pd(n));

    e = _mm256_andnot_pd(under, e);
    return _mm256_or_pd(e, nan_mask);
}

constexpr std::size_t kMaxDims = 16;

void se_ard_block(const double* const* rows, std::size_t offset, std::size_t dims, const double* col,
                  const double* inv_ls2, __m256d variance, double* out) {
    __m256d acc = _mm256_setzero_pd();
    for (std::size_t d = 0; d < dims; ++d) {
        const __m256d r = _mm256_sub_pd(_mm256_loadu_pd(rows[d] + offset), _mm256_set1_pd(col[d]));
        acc = _mm256_fmadd_pd(_mm256_mul_pd(r, r), _mm256_set1_pd(inv_ls2[d]), acc);
    }
    const __m256d k = _mm256_mul_pd(variance, exp_pd(_mm256_mul_pd(_mm256_set1_pd(-0.5), acc)));
    _mm256_storeu_pd(out + offset, k);
}

void se_ard_column(const double* const* rows, std::size_t n, std::size_t dims, const double* col,
                   const double* inv_ls2, double variance, double* out) {
    const __m256d var = _mm256_set1_pd(variance);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) se_ard_block(rows, i, dims, col, inv_ls2, var, out);
    if (i == n) return;

    // Tail: pad with the column input itself (zero distance) and run one block.
    alignas(32) double pad[kMaxDims][4];
    const double* pad_rows[kMaxDims];
    alignas(32) double tail[4];
    for (std::size_t d = 0; d < dims; ++d) {
        for (std::size_t t = 0; t < 4; ++t) pad[d][t] = i + t < n ? rows[d][i + t] : col[d];
        pad_rows[d] = pad[d];
    }
    se_ard_block(pad_rows, 0, dims, col, inv_ls2, var, tail);
    for (std::size_t t = 0; i + t < n; ++t) out[i + t] = tail[t];
}

void fgk_block(const double* const* rows, const double* const* row_ls, std::size_t offset, std::size_t dims,
               const double* col, const double* col_ls, double* out) {
    const __m256d two = _mm256_set1_pd(2.0);
    __m256d expo = _mm256_setzero_pd();
    __m256d pref = _mm256_set1_pd(1.0);
    for (std::size_t d = 0; d < dims; ++d) {
        const __m256d a = _mm256_loadu_pd(row_ls[d] + offset);
        const __m256d b = _mm256_set1_pd(col_ls[d]);
        const __m256d s = _mm256_fmadd_pd(a, a, _mm256_mul_pd(b, b));
        const __m256d r = _mm256_sub_pd(_mm256_loadu_pd(rows[d] + offset), _mm256_set1_pd(col[d]));
        expo = _mm256_add_pd(expo, _mm256_div_pd(_mm256_mul_pd(r, r), s));
        pref = _mm256_mul_pd(pref, _mm256_div_pd(_mm256_mul_pd(two, _mm256_mul_pd(a, b)), s));
    }
    const __m256d k = _mm256_mul_pd(_mm256_sqrt_pd(pref), exp_pd(_mm256_sub_pd(_mm256_setzero_pd(), expo)));
    _mm256_storeu_pd(out + offset, k);
}

void fgk_column(const double* const* rows, const double* const* row_ls, std::size_t n, std::size_t dims,
                const double* col, const double* col_ls, double* out) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) fgk_block(rows, row_ls, i, dims, col, col_ls, out);
    if (i == n) return;

    alignas(32) double pad_x[kMaxDims][4];
    alignas(32) double pad_l[kMaxDims][4];
    const double* px[kMaxDims];
    const double* pl[kMaxDims];
    alignas(32) double tail[4];
    for (std::size_t d = 0; d < dims; ++d) {
        for (std::size_t t = 0; t < 4; ++t) {
            pad_x[d][t] = i + t < n ? rows[d][i + t] : col[d];
            pad_l[d][t] = i + t < n ? row_ls[d][i + t] : col_ls[d];
        }
        px[d] = pad_x[d];
        pl[d] = pad_l[d];
    }
    fgk_block(px, pl, 0, dims, col, col_ls, tail);
    for (std::size_t t = 0; i + t < n; ++t) out[i + t] = tail[t];
}

void exp_array(const double* in, std::size_t n, double* out) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, exp_pd(_mm256_loadu_pd(in + i)));
    if (i == n) return;
    alignas(32) double buf[4] = {0.0, 0.0, 0.0, 0.0};
    for (std::size_t t = 0; i + t < n; ++t) buf[t] = in[i + t];
    _mm256_store_pd(buf, exp_pd(_mm256_load_pd(buf)));
    for (std::size_t t = 0; i + t < n; ++t) out[i + t] = buf[t];
}

}  // namespace

const KernelTable& table() {
    static const KernelTable t{Isa::avx2, "avx2", &se_ard_column, &fgk_column, &exp_array};
    return t;
}

}  // namespace nsgp::simd::avx2
