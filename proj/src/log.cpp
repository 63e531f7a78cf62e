#include "alter/log.hpp"

#include <iostream>

namespace alter {

namespace {
WarningSink& sink() {
    static WarningSink s;
    return s;
}
}  // namespace

void set_warning_sink(WarningSink s) { sink() = std::move(s); }

void warn(const std::string& message) {
    if (sink()) {
        sink()(message);
    } else {
        std::cerr << "warning: " << message << '\n';
    }
}

}  // namespace alter
