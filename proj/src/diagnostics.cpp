#include "germtl/diagnostics.hpp"

#include <iostream>
#include <utility>

namespace germtl {

namespace {
thread_local WarningSink tl_sink;
}

void warn(const std::string& message) {
  if (tl_sink) {
    tl_sink(message);
    return;
  }
  std::cerr << "warning: " << message << '\n';
}

WarningSink set_warning_sink(WarningSink sink) {
  return std::exchange(tl_sink, std::move(sink));
}

}  // namespace germtl
