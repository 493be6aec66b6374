#pragma once

#include <ostream>

namespace mmfuse {

// Entry point of the mmfuse command line. Returns the process exit code;
// errors are reported on `err` as "error[<kind>]: <message>".
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mmfuse
