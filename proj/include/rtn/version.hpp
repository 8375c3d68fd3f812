#pragma once

namespace rtn {

// build identifier baked in at configure time
const char* version_string();

}  // namespace rtn
