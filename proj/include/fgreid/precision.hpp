#pragma once

// The library is compiled twice: the default float build used by the tools,
// and a double build (FGREID_REAL_DOUBLE) used by gradient checks. Each build
// lives in its own inline namespace so both can be linked into one binary.

#if defined(FGREID_REAL_DOUBLE)
#define FGREID_PRECISION f64
#else
#define FGREID_PRECISION f32
#endif

namespace fgreid::inline FGREID_PRECISION {

#if defined(FGREID_REAL_DOUBLE)
using Real = double;
#else
using Real = float;
#endif

}  // namespace fgreid::inline FGREID_PRECISION
