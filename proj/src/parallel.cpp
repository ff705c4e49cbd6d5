#include "fafesort/parallel.hpp"

#include <omp.h>

#include <cstdlib>
#include <string>

namespace fafesort {

int effective_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("FAFESORT_THREADS")) {
        try {
            const int n = std::stoi(env);
            if (n > 0) return n;
        } catch (...) {
            // fall through to the OpenMP default
        }
    }
    return omp_get_max_threads();
}

}  // namespace fafesort
