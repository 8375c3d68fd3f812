#include "rtn/version.hpp"

#ifndef RTN_GIT_DESC
#define RTN_GIT_DESC "unversioned"
#endif

namespace rtn {

const char* version_string() { return RTN_GIT_DESC; }

}  // namespace rtn
