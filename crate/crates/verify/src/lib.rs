//! Holds the `acceptance` test target only. It lives in its own package so
//! that a long, possibly failing run comes after every other test target.
