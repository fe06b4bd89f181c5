#pragma once

#include <string>
#include <vector>

namespace test_support {

struct WellFormed {
  std::string text;
  bool wood;
  bool settlement;
};

inline const std::vector<WellFormed>& well_formed_answers() {
  static const std::vector<WellFormed> corpus{
      {"1. **Wood?** Yes: In the right image, there are clusters of closely spaced, small circular symbols.\n"
       "2. **Settlement?** Yes: The image shows dotted patterns and outlined blocks.",
       true, true},
      {"1. **Wood?** Yes: clusters of circles\n2. **Settlement?** Yes: dotted patterns", true, true},
      {"1. **Wood?** No: plain\n2. **Settlement?** No: plain", false, false},
      {"1. **Wood?** Yes : circles\n2. **Settlement?** No : nothing", true, false},
      {"1. **wood?** no: none\n2. **settlement?** yes: dots", false, true},
      {"1. **WOOD?** YES: many rings\n2. **SETTLEMENT?** NO: empty", true, false},
      {"**Wood?** Yes: rings\n**Settlement?** No: none", true, false},
      {"Here is my answer.\n\n1. **Wood?** No: only lines\n2. **Settlement?** No: only lines\n\nHope this helps.",
       false, false},
      {"1. **Wood?** Yes: rings\r\n2. **Settlement?** Yes: dots\r\n", true, true},
      {"2. **Settlement?** No: none\n1. **Wood?** Yes: rings", true, false},
      {"1. **Wood?** **Yes**: circular symbols\n2. **Settlement?** **No**: no hatching", true, false},
      {"1. **Wood?** [Yes] : rings\n2. **Settlement?** [No] : none", true, false},
      {"1) **Wood?** Yes - rings everywhere\n2) **Settlement?** No - blank", true, false},
      {"1. **Wood?**: Yes: rings\n2. **Settlement?**: No: nothing", true, false},
      {"1. **Wood?** Yes: note: the symbols at 10:30 are rings\n2. **Settlement?** No:", true, false},
      {"1. **Wood?** No\n2. **Settlement?** Yes", false, true},
      {"  1.  ** Wood ? **  yes: rings   \n  2. ** Settlement ? ** no: none  ", true, false},
      {"1. **Wood?** No, no circles are visible\n2. **Settlement?** Yes, a dotted block", false, true},
  };
  return corpus;
}

inline const std::vector<std::string>& malformed_answers() {
  static const std::vector<std::string> corpus{
      "",
      "I cannot help with that.",
      "I'm sorry, but I can't assist with identifying map content.",
      "As an AI model I am unable to view images.",
      "Yes",
      "Wood: yes\nSettlement: no",
      "1. Wood? Yes: rings\n2. Settlement? No: none",
      "1. **Wood?** Yes: rings",
      "2. **Settlement?** No: none",
      "1. **Wood?** [Yes/No] : [reason]\n2. **Settlement?** [Yes/No] : [reason]",
      "1. **Wood?** Yes/No: unsure\n2. **Settlement?** No: none",
      "1. **Wood?** Yes or No: hard to tell\n2. **Settlement?** No: none",
      "1. **Wood?** Maybe: faint rings\n2. **Settlement?** No: none",
      "1. **Wood?** Not sure\n2. **Settlement?** No: none",
      "1. **Wood?** Yesterday's map\n2. **Settlement?** No: none",
      "1. **Wood?** : rings\n2. **Settlement?** No: none",
      "1. **Wood?** N/A\n2. **Settlement?** N/A",
      "1. **Wood?** Yes: rings\n2. **Settlement?** No: none\n1. **Wood?** No: changed my mind",
      "1. **Forest?** Yes: rings\n2. **Settlement?** No: none",
      "**Wood** Yes: rings\n**Settlement** No: none",
  };
  return corpus;
}

}  // namespace test_support
