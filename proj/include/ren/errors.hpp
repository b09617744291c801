#pragma once

#include <stdexcept>
#include <string>

namespace ren {

// Broad failure classes. The CLI maps them onto exit codes:
// data errors -> 2, numerics errors -> 3.
enum class ErrorClass { kData, kNumerics, kConfig };

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), cls_(cls) {}
  ErrorClass error_class() const noexcept { return cls_; }

 private:
  ErrorClass cls_;
};

#define REN_DEFINE_ERROR(Name, Class)                                     \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(Class, #Name ": " + what) {} \
  };

REN_DEFINE_ERROR(FormatError, ErrorClass::kData)
REN_DEFINE_ERROR(ValidationError, ErrorClass::kData)
REN_DEFINE_ERROR(IoError, ErrorClass::kData)
REN_DEFINE_ERROR(GenerationError, ErrorClass::kData)
REN_DEFINE_ERROR(EmptyMaskError, ErrorClass::kData)
REN_DEFINE_ERROR(EmptyRegionError, ErrorClass::kData)
REN_DEFINE_ERROR(UnsupportedPromptError, ErrorClass::kData)
REN_DEFINE_ERROR(DegenerateBatchError, ErrorClass::kData)
REN_DEFINE_ERROR(DegenerateDataError, ErrorClass::kData)
REN_DEFINE_ERROR(ConfigError, ErrorClass::kConfig)
REN_DEFINE_ERROR(NumericsError, ErrorClass::kNumerics)

#undef REN_DEFINE_ERROR

}  // namespace ren
