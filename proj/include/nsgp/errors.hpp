#pragma once

#include <stdexcept>
#include <string>

namespace nsgp {

/// Broad failure class, used by the CLI to pick an exit code.
enum class ErrorCategory { configuration, numerical };

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    [[nodiscard]] ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

#define NSGP_DEFINE_ERROR(Name, Category)                                  \
    class Name : public Error {                                            \
    public:                                                                \
        explicit Name(const std::string& what)                             \
            : Error(ErrorCategory::Category, #Name ": " + what) {}         \
    };

NSGP_DEFINE_ERROR(NotPositiveDefinite, numerical)
NSGP_DEFINE_ERROR(NonFiniteGradient, numerical)
NSGP_DEFINE_ERROR(DivergedObjective, numerical)
NSGP_DEFINE_ERROR(GridTooCoarse, numerical)
NSGP_DEFINE_ERROR(DimensionMismatch, configuration)
NSGP_DEFINE_ERROR(InvalidArgument, configuration)
NSGP_DEFINE_ERROR(NonPositiveLengthscale, configuration)
NSGP_DEFINE_ERROR(MissingLatentContext, configuration)
NSGP_DEFINE_ERROR(ParseError, configuration)
NSGP_DEFINE_ERROR(EmptyDataset, configuration)
NSGP_DEFINE_ERROR(DegenerateSplit, configuration)
NSGP_DEFINE_ERROR(KTooLarge, configuration)
NSGP_DEFINE_ERROR(NonPositiveTarget, configuration)
NSGP_DEFINE_ERROR(ConfigError, configuration)

#undef NSGP_DEFINE_ERROR

}  // namespace nsgp
