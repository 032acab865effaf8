#pragma once

// On-disk cohort bundle:
//   <dir>/manifest.json
//   <dir>/<subject>/<session>.signals.bin   "SEEGBNDL" + u32 rows + u32 cols,
//                                           float32 LE, row-major
//   <dir>/<subject>/<session>.events.csv    stim_onset,color_change,rt_ms

#include <seeg/cohort.hpp>

#include <filesystem>

namespace seeg {

void write_bundle(const Cohort& cohort, const std::filesystem::path& dir);

/// Loads and fully validates; errors carry subject/session context.
Cohort load_bundle(const std::filesystem::path& dir);

}  // namespace seeg
