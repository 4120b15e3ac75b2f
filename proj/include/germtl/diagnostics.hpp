#pragma once

#include <functional>
#include <string>

namespace germtl {

using WarningSink = std::function<void(const std::string&)>;

// Routes a warning to the installed sink (stderr by default).
void warn(const std::string& message);

// Installs a sink for the calling thread and returns the previous one.
// An empty sink restores the stderr default.
WarningSink set_warning_sink(WarningSink sink);

}  // namespace germtl
