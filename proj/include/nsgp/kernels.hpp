#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "nsgp/linalg.hpp"

namespace nsgp {

/// Largest input dimensionality handled by the multivariate Gibbs kernel.
inline constexpr int kMaxMgkDims = 4;

using SmallMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxMgkDims, kMaxMgkDims>;
using SmallVector = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxMgkDims, 1>;

class KernelSpec;
using KernelPtr = std::shared_ptr<const KernelSpec>;

// Leaf and composite nodes. Positive parameters are stored on their natural
// scale; optimisation works on their logarithms.
struct SeArd {
    double variance;
    std::vector<double> lengthscales;
};
struct Periodic {
    double variance;
    double lengthscale;
    double period;
};
struct Constant {
    double variance;
};
/// Factorised Gibbs kernel; per-dimension lengthscales come from latent field `field`.
struct Fgk {
    std::size_t field;
};
/// Multivariate Gibbs kernel; Sigma(x) comes from matrix field `field`.
struct Mgk {
    std::size_t field;
};
struct Sum {
    KernelPtr left;
    KernelPtr right;
};
struct Product {
    KernelPtr left;
    KernelPtr right;
};

/// Parameter groups that can be frozen during optimisation.
enum FixedParam : unsigned {
    kFixVariance = 1u << 0,
    kFixLengthscale = 1u << 1,
    kFixPeriod = 1u << 2,
};

/// Immutable sum/product tree of covariance functions. Each leaf reads the
/// input columns listed in active_dims.
class KernelSpec {
public:
    using Node = std::variant<SeArd, Periodic, Constant, Fgk, Mgk, Sum, Product>;

    /// Constant kernel with unit variance.
    KernelSpec() : node_(Constant{1.0}) {}

    static KernelSpec se_ard(double variance, std::vector<double> lengthscales, std::vector<int> active_dims);
    static KernelSpec periodic(double variance, double lengthscale, double period, int active_dim);
    static KernelSpec constant(double variance);
    static KernelSpec fgk(std::size_t field, std::vector<int> active_dims);
    static KernelSpec mgk(std::size_t field, std::vector<int> active_dims);
    static KernelSpec sum(KernelSpec left, KernelSpec right);
    static KernelSpec product(KernelSpec left, KernelSpec right);

    [[nodiscard]] const Node& node() const { return node_; }
    [[nodiscard]] const std::vector<int>& active_dims() const { return active_dims_; }
    [[nodiscard]] unsigned fixed() const { return fixed_; }
    [[nodiscard]] KernelSpec with_fixed(unsigned mask) const;

    [[nodiscard]] bool is_leaf() const;

private:
    KernelSpec(Node node, std::vector<int> active_dims);

    Node node_;
    std::vector<int> active_dims_;
    unsigned fixed_ = 0;
};

KernelSpec operator+(KernelSpec a, KernelSpec b);
KernelSpec operator*(KernelSpec a, KernelSpec b);

// ---- hyperparameters ------------------------------------------------------

/// Trainable log-hyperparameters in pre-order.
Vector log_hyperparameters(const KernelSpec& k);
Index hyperparameter_count(const KernelSpec& k);
std::vector<std::string> hyperparameter_names(const KernelSpec& k);
KernelSpec with_log_hyperparameters(const KernelSpec& k, const Vector& log_values);

/// Largest referenced input column + 1 (0 for input-free trees).
int required_input_dims(const KernelSpec& k);

enum class FieldKind { lengthscale, matrix };
struct FieldRef {
    std::size_t field;
    FieldKind kind;
    std::vector<int> dims;
};
/// Fgk/Mgk references in pre-order.
std::vector<FieldRef> field_references(const KernelSpec& k);

/// True when the tree contains an Fgk or Mgk node.
bool has_nonstationary(const KernelSpec& k);

// ---- pointwise kernels ----------------------------------------------------

double k_se_ard(const Vector& xi, const Vector& xj, double variance, const std::vector<double>& lengthscales);
double k_periodic(double xi, double xj, double variance, double lengthscale, double period);
double k_fgk(const Vector& xi, const Vector& xj, const Vector& li, const Vector& lj);
double k_mgk(const Vector& xi, const Vector& xj, const SmallMatrix& sigma_i, const SmallMatrix& sigma_j);

struct QuadratureGrid {
    int points_per_dim = 161;
    double half_width_sd = 8.0;  ///< grid half-width in standard deviations of the integrand
};

/// Trapezoid quadrature of exp{-(xi-a)' Si^-1 (xi-a) - (xj-a)' Sj^-1 (xj-a)} over a
/// (D <= 2), divided by its Gaussian normaliser so the result is comparable
/// with the exponent factor exp{-d' (Si+Sj)^-1 d} of k_mgk. Throws
/// GridTooCoarse when doubling the resolution moves the result by > 1e-6.
double verify_prop2_integral(const Vector& xi, const Vector& xj, const SmallMatrix& sigma_i,
                             const SmallMatrix& sigma_j, const QuadratureGrid& grid = {});

enum class SpatioTemporal { stationary, nonstationary };

/// Parameters of the additive spatio-temporal composition over (lat, lon, t):
///   k = k_se(spatial) * k_per(t) + k_spatial,
/// where k_spatial is SE-ARD (stationary) or the FGK with per-point lengthscales.
struct SpatioTemporalParams {
    double temporal_variance = 1.0;
    std::vector<double> temporal_lengthscales{1.0, 1.0};
    double periodic_variance = 1.0;
    double periodic_lengthscale = 1.0;
    double period = 12.0;
    double spatial_variance = 1.0;
    std::vector<double> spatial_lengthscales{1.0, 1.0};
};

/// Kernel tree for the composition; the FGK variant references field 0.
KernelSpec spatiotemporal_kernel(SpatioTemporal kind, const SpatioTemporalParams& p);

/// Pointwise evaluation with inputs (lat, lon, t); li/lj are the FGK
/// lengthscales at xi/xj (ignored for the stationary kind).
double k_spatiotemporal(const Vector& xi, const Vector& xj, SpatioTemporal kind, const SpatioTemporalParams& p,
                        const Vector& li = Vector(), const Vector& lj = Vector());

// ---- latent context and Gram assembly -------------------------------------

/// A latent field evaluated at a set of n inputs.
struct FieldContext {
    Matrix log_lengthscales;         ///< FGK: n x D
    std::vector<SmallMatrix> sigma;  ///< MGK: Sigma(x_i), size n
};
/// Indexed by field id.
using LatentContext = std::vector<FieldContext>;

struct GramMatrix {
    Matrix values;
    bool symmetric = false;
};

GramMatrix gram(const KernelSpec& k, const Matrix& x_rows, const Matrix& x_cols, const LatentContext& ctx_rows,
                const LatentContext& ctx_cols);
GramMatrix gram(const KernelSpec& k, const Matrix& x, const LatentContext& ctx = {});
Vector gram_diag(const KernelSpec& k, const Matrix& x, const LatentContext& ctx = {});

/// Single entry k(x_rows[i], x_cols[j]) through the scalar reference path.
double kernel_entry(const KernelSpec& k, const Matrix& x_rows, Index i, const LatentContext& ctx_rows,
                    const Matrix& x_cols, Index j, const LatentContext& ctx_cols);

/// Gradient of a latent field's entries.
struct FieldAdjoint {
    Matrix log_lengthscales;
    std::vector<SmallMatrix> sigma;
};

/// Reverse-mode result of a scalar L(K) given dL/dK.
struct GramAdjoint {
    Vector hyper;                            ///< w.r.t. log_hyperparameters(k)
    Matrix rows_inputs;                      ///< w.r.t. x_rows (when requested)
    Matrix cols_inputs;                      ///< w.r.t. x_cols (when requested)
    std::vector<FieldAdjoint> rows_fields;   ///< w.r.t. ctx_rows entries
    std::vector<FieldAdjoint> cols_fields;   ///< w.r.t. ctx_cols entries
};

GramAdjoint gram_backward(const KernelSpec& k, const Matrix& x_rows, const Matrix& x_cols,
                          const LatentContext& ctx_rows, const LatentContext& ctx_cols, const Matrix& adjoint,
                          bool want_inputs);

/// Symmetric Gram K(x, x): row and column contributions are merged into the
/// rows_* members.
GramAdjoint gram_backward_symmetric(const KernelSpec& k, const Matrix& x, const LatentContext& ctx,
                                    const Matrix& adjoint, bool want_inputs);

/// Adjoint of gram_diag; contributions merged into rows_*.
GramAdjoint gram_diag_backward(const KernelSpec& k, const Matrix& x, const LatentContext& ctx,
                               const Vector& adjoint, bool want_inputs);

}  // namespace nsgp
