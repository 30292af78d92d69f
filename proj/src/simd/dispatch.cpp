#include <atomic>
#include <cstdlib>
#include <cstring>

#include "nsgp/simd.hpp"

namespace nsgp::simd {

namespace {

const KernelTable* detect() {
    const char* env = std::getenv("NSGP_SIMD");
    if (env != nullptr && std::strcmp(env, "scalar") == 0) return &scalar_table();
    if (const KernelTable* t = avx2_table(); t != nullptr && cpu_supports_avx2()) return t;
    return &scalar_table();
}

std::atomic<const KernelTable*>& active() {
    static std::atomic<const KernelTable*> table{detect()};
    return table;
}

}  // namespace

bool cpu_supports_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const KernelTable* avx2_table() {
#if defined(NSGP_HAVE_AVX2)
    return &avx2::table();
#else
    return nullptr;
#endif
}

const KernelTable& active_table() { return *active().load(std::memory_order_acquire); }

bool select_isa(Isa isa) {
    const KernelTable* t = nullptr;
    switch (isa) {
        case Isa::scalar: t = &scalar_table(); break;
        case Isa::avx2: t = cpu_supports_avx2() ? avx2_table() : nullptr; break;
    }
    if (t == nullptr) return false;
    active().store(t, std::memory_order_release);
    return true;
}

}  // namespace nsgp::simd
